"""Mask GAN and U-Net absorption quantifier."""

from .gan import (GanHyperparams, GanResult, GanTrainingError, MaskGAN, build_dcgan, disk_area, disk_masks,
                  load_gan_checkpoint, p_flip, sample_masks, save_gan_checkpoint, smooth_real_label, train_gan)
from .unet import UNet, UNetQuantifier, UnetSpec, build_unet, predict_mua, train_unet

__all__ = [
    "GanHyperparams", "GanResult", "GanTrainingError", "MaskGAN", "UNet", "UNetQuantifier", "UnetSpec",
    "build_dcgan", "build_unet", "disk_area", "disk_masks", "load_gan_checkpoint", "p_flip", "predict_mua",
    "sample_masks", "save_gan_checkpoint", "smooth_real_label", "train_gan", "train_unet",
]
