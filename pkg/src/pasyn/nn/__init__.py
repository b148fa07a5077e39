"""Small numpy neural-network kernel with hand-written backward passes."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check, projection_loss, relative_error
from .layers import (
    BatchNorm2d,
    ChannelSoftmax,
    ConcatSkip,
    Conv2d,
    Crop,
    Dense,
    ConvTranspose2d,
    Layer,
    LeakyReLU,
    MaxPool2x2,
    NNError,
    ReLU,
    Sequential,
    Sigmoid,
    Tanh,
    UpsampleNearest2x,
    build_layer,
    concat_skip,
    concat_skip_backward,
    named_buffers,
    named_gradients,
    named_parameters,
    set_state,
)
from .losses import bce_loss, mse_loss
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "ChannelSoftmax", "CheckpointError", "ConcatSkip", "Conv2d", "Crop", "Dense",
    "ConvTranspose2d", "Layer", "LeakyReLU", "MaxPool2x2", "NNError", "ReLU", "Sequential", "Sigmoid",
    "Tanh", "UpsampleNearest2x", "adam_step", "bce_loss", "build_layer", "concat_skip",
    "concat_skip_backward", "grad_check", "load_checkpoint", "mse_loss", "named_buffers",
    "named_gradients", "named_parameters", "projection_loss", "relative_error", "save_checkpoint",
    "set_state",
]
