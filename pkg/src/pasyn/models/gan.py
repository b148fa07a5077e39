"""DCGAN mask generator: architecture, schedule helpers, training, sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from ..geometry import (DEFAULT_SPACING_MM, LabelMap, N_CLASSES, TissueClass, apply_index_map,
                        apply_index_map_backward, affine_index_map, argmax_decode, one_hot)
from ..nn import (AdamState, BatchNorm2d, ChannelSoftmax, Conv2d, ConvTranspose2d, Crop, Dense, LeakyReLU,
                  ReLU, Sequential, Sigmoid, adam_step, bce_loss, build_layer, load_checkpoint,
                  named_buffers, named_gradients, named_parameters, save_checkpoint, set_state)

# generator latent size per body site
SITE_LATENT_DIM = {"forearm": 100, "calf": 106, "neck": 100}


class GanTrainingError(RuntimeError):
    pass


@dataclass
class GanHyperparams:
    max_epochs: int = 700
    batch_size: int = 3
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    latent_dim: int = 100
    disc_base_channels: int = 56
    gen_base_channels: int = 32
    smooth_low: float = -0.3
    smooth_high: float = 0.0
    flip_intercept: float = 0.2
    flip_slope: float = -2.9e-4
    p_trans: float = 0.6
    rot_range_deg: tuple = (-45.0, 45.0)
    trans_range_px: tuple = (-5.0, 5.0)
    augment: bool = True
    straight_through: bool = True
    beta1: float = 0.5
    beta2: float = 0.999
    n_blocks: int | None = None
    max_steps: int | None = None
    checkpoint_every: int = 50

    def __post_init__(self):
        self.rot_range_deg = tuple(self.rot_range_deg)
        self.trans_range_px = tuple(self.trans_range_px)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.p_trans <= 1.0:
            raise ValueError("p_trans must lie in [0, 1]")
        if not 0.0 <= self.flip_intercept <= 1.0:
            raise ValueError("flip_intercept must lie in [0, 1]")
        if self.smooth_low > self.smooth_high or not -1.0 <= self.smooth_low <= 0.0 <= self.smooth_high + 1.0:
            raise ValueError("smoothing bounds must satisfy -1 <= low <= high")
        if self.latent_dim < 1 or self.disc_base_channels < 1 or self.gen_base_channels < 1:
            raise ValueError("channel sizes must be positive")

    @classmethod
    def for_site(cls, site: str, **overrides) -> "GanHyperparams":
        if site not in SITE_LATENT_DIM:
            raise ValueError(f"unknown body site {site!r}")
        return cls(**{"latent_dim": SITE_LATENT_DIM[site], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "GanHyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GAN hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rot_range_deg"] = list(self.rot_range_deg)
        d["trans_range_px"] = list(self.trans_range_px)
        return d


def p_flip(epoch, hp: GanHyperparams | None = None) -> float:
    """Label-flip probability, linear in epoch and clamped to [0, 1]."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    hp = hp or GanHyperparams()
    return float(min(1.0, max(0.0, hp.flip_intercept + hp.flip_slope * epoch)))


def smooth_real_label(rng: np.random.Generator, size=None, hp: GanHyperparams | None = None):
    """Soft target for real samples, ``1 + U(low, high)``."""
    hp = hp or GanHyperparams()
    return 1.0 + rng.uniform(hp.smooth_low, hp.smooth_high, size)


# --------------------------------------------------------------------------
# architecture


def _auto_blocks(h, w, max_blocks=4, min_side=4):
    n = max_blocks
    while n > 1 and min(h, w) / 2 ** n < min_side:
        n -= 1
    return n


def build_dcgan(hp: GanHyperparams, mask_shape, seed=0, dtype=np.float32):
    """Generator and discriminator for masks of ``mask_shape`` = (x, z).

    Tensors are laid out (N, 7, z, x).  Spatial sizes that are not a
    multiple of ``2**n_blocks`` are generated padded and cropped.
    """
    if len(mask_shape) != 2 or min(mask_shape) < 4:
        raise ValueError(f"incompatible mask shape {mask_shape}")
    w, h = int(mask_shape[0]), int(mask_shape[1])
    n = hp.n_blocks or _auto_blocks(h, w)
    f = 2 ** n
    hp_, wp_ = math.ceil(h / f) * f, math.ceil(w / f) * f
    h0, w0 = hp_ // f, wp_ // f
    rng = np.random.default_rng(seed)
    kw = {"rng": rng, "dtype": dtype}

    ch = [hp.gen_base_channels * 2 ** (n - 1 - i) for i in range(n)]
    g = [Dense(hp.latent_dim, (ch[0], h0, w0), bias=False, **kw), BatchNorm2d(ch[0], **kw), ReLU()]
    for i in range(1, n):
        g += [ConvTranspose2d(ch[i - 1], ch[i], 4, 2, 1, bias=False, **kw), BatchNorm2d(ch[i], **kw), ReLU()]
    g += [ConvTranspose2d(ch[-1], N_CLASSES, 4, 2, 1, **kw), ChannelSoftmax()]
    if (hp_, wp_) != (h, w):
        g.append(Crop(h, w))

    c = hp.disc_base_channels
    d = [Conv2d(N_CLASSES, c, 4, 2, 1, **kw), LeakyReLU(0.2)]
    sh, sw = d[0].output_shape(h, w)
    for _ in range(1, n):
        conv = Conv2d(c, 2 * c, 4, 2, 1, bias=False, **kw)
        sh, sw = conv.output_shape(sh, sw)
        d += [conv, BatchNorm2d(2 * c, **kw), LeakyReLU(0.2)]
        c *= 2
    d += [Dense(c * sh * sw, (1, 1, 1), **kw), Sigmoid()]
    return Sequential(g), Sequential(d)


# --------------------------------------------------------------------------
# training


@dataclass
class GanResult:
    generator: Sequential
    discriminator: Sequential
    hp: GanHyperparams
    mask_shape: tuple
    spacing_mm: float
    history: list = field(default_factory=list)  # (epoch, d_loss, g_loss, d_acc)
    steps: int = 0


def _augment_batch(x, rng, hp):
    maps = []
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        src = None
        if hp.augment:
            src = affine_index_map(x.shape[2:], rng, hp.p_trans, hp.rot_range_deg, hp.trans_range_px,
                                   hp.trans_range_px)
        maps.append(src)
        out[i] = apply_index_map(x[i], src)
    return out, maps


def _augment_backward(grad, maps):
    out = np.empty_like(grad)
    for i, src in enumerate(maps):
        out[i] = apply_index_map_backward(grad[i], src)
    return out


def harden(probs):
    """One-hot of the per-pixel argmax of ``(N, C, H, W)`` probabilities."""
    idx = np.argmax(probs, axis=1)
    out = np.zeros_like(probs)
    np.put_along_axis(out, idx[:, None], 1.0, axis=1)
    return out


def _finite(value, what, epoch, step):
    if not np.isfinite(value):
        raise GanTrainingError(f"non-finite {what} at epoch {epoch}, step {step}")


def train_gan(masks, hp: GanHyperparams, seed: int = 0, checkpoint_dir=None, log=None,
              epochs: int | None = None) -> GanResult:
    """Adversarial training on a list of :class:`LabelMap` masks.

    Each step trains the discriminator on one concatenated real+fake batch
    (both augmented), then the generator through the discriminator with the
    non-saturating loss.  With ``hp.straight_through`` the discriminator
    sees the argmax one-hot of each generated map, so it cannot tell fakes
    by their soft probabilities alone; the gradient reaches the softmax
    unchanged.  Training stops after ``hp.max_epochs`` epochs or
    ``hp.max_steps`` steps, whichever comes first.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("empty mask dataset")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks) or len(shape) != 2:
        raise ValueError("all masks must be 2D with one shape")
    x_all = np.stack([one_hot(m) for m in masks]).astype(np.float32)
    gen, disc = build_dcgan(hp, shape, seed=seed)
    rng = np.random.default_rng([int(seed), 1])
    opt_g = AdamState(lr=hp.lr_g, beta1=hp.beta1, beta2=hp.beta2)
    opt_d = AdamState(lr=hp.lr_d, beta1=hp.beta1, beta2=hp.beta2)
    res = GanResult(gen, disc, hp, shape, masks[0].spacing_mm)
    # the first discriminator layer still needs its input gradient for the generator step
    n = len(masks)
    max_epochs = epochs if epochs is not None else hp.max_epochs
    step = 0
    for epoch in range(max_epochs):
        perm = rng.permutation(n)
        d_losses, g_losses, d_accs = [], [], []
        pf = p_flip(epoch, hp)
        for start in range(0, n, hp.batch_size):
            if hp.max_steps is not None and step >= hp.max_steps:
                break
            idx = perm[start : start + hp.batch_size]
            b = len(idx)
            real, _ = _augment_batch(x_all[idx], rng, hp)
            z = rng.standard_normal((b, hp.latent_dim, 1, 1)).astype(np.float32)
            fake = gen.forward(z)
            if hp.straight_through:
                # forward the hard one-hot, backward through the softmax unchanged
                fake = harden(fake)
            fake_aug, fake_maps = _augment_batch(fake, rng, hp)

            # discriminator step
            t_real = smooth_real_label(rng, b, hp)
            t_fake = np.zeros(b)
            if rng.random() < pf:
                t_real, t_fake = t_fake, t_real
            target = np.concatenate([t_real, t_fake]).reshape(2 * b, 1, 1, 1).astype(np.float32)
            out = disc.forward(np.concatenate([real, fake_aug]))
            d_loss, grad = bce_loss(out, target)
            # accuracy against the true (unflipped) labels
            d_accs.append(0.5 * (float(np.mean(out[:b] > 0.5)) + float(np.mean(out[b:] < 0.5))))
            _finite(d_loss, "discriminator loss", epoch, step)
            disc.backward(grad)
            adam_step(named_parameters(disc), named_gradients(disc), opt_d)

            # generator step (non-saturating)
            out = disc.forward(fake_aug)
            g_loss, grad = bce_loss(out, np.ones_like(out))
            _finite(g_loss, "generator loss", epoch, step)
            dx = disc.backward(grad)
            gen.backward(_augment_backward(dx, fake_maps))
            adam_step(named_parameters(gen), named_gradients(gen), opt_g)

            d_losses.append(d_loss)
            g_losses.append(g_loss)
            step += 1
        if not d_losses:
            break
        res.history.append((epoch, float(np.mean(d_losses)), float(np.mean(g_losses)), float(np.mean(d_accs))))
        if log:
            log(f"epoch {epoch} d_loss {res.history[-1][1]:.4f} g_loss {res.history[-1][2]:.4f}")
        if checkpoint_dir is not None and hp.checkpoint_every and (epoch + 1) % hp.checkpoint_every == 0:
            save_gan_checkpoint(Path(checkpoint_dir) / f"gan_epoch{epoch + 1:04d}.ckpt", res)
    res.steps = step
    gen.eval()
    disc.eval()
    return res


def write_gan_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "d_loss", "g_loss", "d_acc"])
        for e, d, g, a in history:
            w.writerow([e, repr(d), repr(g), repr(a)])


def discriminator_accuracy(disc, real, fake) -> float:
    """Balanced accuracy of ``disc`` (eval mode) on real and generated batches.

    Pass ``harden(fake)`` for a generator trained with straight-through fakes.
    """
    disc.eval()
    pr = disc.forward(real).ravel()
    pf = disc.forward(fake).ravel()
    return 0.5 * (float(np.mean(pr > 0.5)) + float(np.mean(pf < 0.5)))


# --------------------------------------------------------------------------
# persistence and sampling


def save_gan_checkpoint(path, res: GanResult) -> Path:
    arrays = {}
    for prefix, net in (("generator", res.generator), ("discriminator", res.discriminator)):
        for k, v in {**named_parameters(net), **named_buffers(net)}.items():
            arrays[f"{prefix}.{k}"] = v
    arch = {"model": "dcgan", "generator": res.generator.spec(), "discriminator": res.discriminator.spec(),
            "mask_shape": list(res.mask_shape), "latent_dim": res.hp.latent_dim}
    meta = {"hyperparams": res.hp.to_dict(), "spacing_mm": res.spacing_mm, "steps": res.steps,
            "history": [list(h) for h in res.history]}
    return save_checkpoint(path, arch, arrays, meta)


def load_gan_checkpoint(path) -> GanResult:
    arch, arrays, meta = load_checkpoint(path)
    if arch.get("model") != "dcgan":
        raise ValueError(f"{path}: not a DCGAN checkpoint")
    nets = []
    for prefix in ("generator", "discriminator"):
        net = build_layer(arch[prefix])
        sub = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
        set_state(net, sub)
        net.eval()
        nets.append(net)
    hp = GanHyperparams.from_dict(meta.get("hyperparams", {"latent_dim": arch["latent_dim"]}))
    return GanResult(nets[0], nets[1], hp, tuple(arch["mask_shape"]), meta.get("spacing_mm", DEFAULT_SPACING_MM),
                     [tuple(h) for h in meta.get("history", [])], meta.get("steps", 0))


def sample_masks(model, n: int, seed: int = 0, batch: int = 32) -> list:
    """Draw ``n`` masks from a trained generator (a :class:`GanResult` or checkpoint path)."""
    if not isinstance(model, GanResult):
        model = load_gan_checkpoint(model)
    if n < 0:
        raise ValueError("n must be >= 0")
    gen = model.generator
    gen.eval()
    rng = np.random.default_rng(seed)
    out = []
    for start in range(0, n, batch):
        b = min(batch, n - start)
        z = rng.standard_normal((b, model.hp.latent_dim, 1, 1)).astype(np.float32)
        probs = gen.forward(z)
        gen._cache = None
        out.extend(argmax_decode(p, model.spacing_mm) for p in probs)
    for m in out:
        m.meta.update({"generator": "gan", "sample_seed": int(seed)})
    return out


class MaskGAN(BaseEstimator):
    """Estimator wrapper: ``fit`` on a list of label maps, ``sample`` new ones."""

    def __init__(self, latent_dim=100, batch_size=3, max_epochs=700, max_steps=None, lr_g=2e-4, lr_d=2e-4,
                 disc_base_channels=56, gen_base_channels=32, augment=True, random_state=0):
        self.latent_dim = latent_dim
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_steps = max_steps
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.disc_base_channels = disc_base_channels
        self.gen_base_channels = gen_base_channels
        self.augment = augment
        self.random_state = random_state

    def hyperparams(self) -> GanHyperparams:
        return GanHyperparams(max_epochs=self.max_epochs, batch_size=self.batch_size, lr_g=self.lr_g,
                              lr_d=self.lr_d, latent_dim=self.latent_dim,
                              disc_base_channels=self.disc_base_channels,
                              gen_base_channels=self.gen_base_channels, augment=self.augment,
                              max_steps=self.max_steps)

    def fit(self, X, y=None):
        self.result_ = train_gan(X, self.hyperparams(), seed=self.random_state or 0)
        self.history_ = list(self.result_.history)
        return self

    def sample(self, n, seed=0):
        return sample_masks(self.result_, n, seed)


def disk_masks(n=200, size=32, radius_px=(3.0, 9.0), seed=0, spacing_mm=DEFAULT_SPACING_MM) -> list:
    """Toy dataset: one artery disk on a muscle background, random radius and centre."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for _ in range(n):
        r = rng.uniform(*radius_px)
        cx, cy = rng.uniform(r, size - r, 2)
        data = np.full((size, size), TissueClass.MUSCLE, dtype=np.uint8)
        data[(xx - cx) ** 2 + (yy - cy) ** 2 <= r * r] = TissueClass.ARTERY
        out.append(LabelMap(data, spacing_mm, {"generator": "toy-disk"}))
    return out


def disk_area(m: LabelMap) -> int:
    return int(np.count_nonzero(m.data == TissueClass.ARTERY))
