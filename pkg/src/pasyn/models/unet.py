"""U-Net regressing log absorption images from log initial-pressure images."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from ..nn import (AdamState, BatchNorm2d, Conv2d, ConvTranspose2d, MaxPool2x2, NNError, ReLU, Sequential,
                  adam_step, concat_skip, concat_skip_backward, load_checkpoint, mse_loss, named_buffers,
                  named_gradients, named_parameters, save_checkpoint, set_state)


class UnetTrainingError(RuntimeError):
    pass


@dataclass
class UnetSpec:
    in_channels: int = 16
    out_channels: int = 16
    image_shape: tuple = (128, 64)  # (x, z)
    depth: int = 4
    base_channels: int = 32
    convs_per_block: int = 2

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        f = 2 ** self.depth
        if any(s % f for s in self.image_shape):
            raise ValueError(f"image shape {self.image_shape} not divisible by 2**depth = {f}")
        if self.depth < 1 or self.base_channels < 1 or self.convs_per_block < 1:
            raise ValueError("depth, base_channels and convs_per_block must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def _block(cin, cout, n, rng, dtype):
    layers = []
    for i in range(n):
        layers += [Conv2d(cin if i == 0 else cout, cout, 3, 1, 1, bias=False, rng=rng, init="he", dtype=dtype),
                   BatchNorm2d(cout, dtype=dtype), ReLU()]
    return Sequential(layers)


class UNet:
    """Encoder-decoder with max-pool down-sampling, 2x2 transposed-conv up-sampling
    and channel-concatenated skips.  Works on (N, C, z, x) tensors."""

    def __init__(self, spec: UnetSpec, seed=0, dtype=np.float32):
        self.spec_ = spec
        rng = np.random.default_rng(seed)
        c = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        k = spec.convs_per_block
        self.enc = [_block(spec.in_channels if i == 0 else c[i - 1], c[i], k, rng, dtype)
                    for i in range(spec.depth)]
        self.pools = [MaxPool2x2() for _ in range(spec.depth)]
        self.bottom = _block(c[spec.depth - 1], c[spec.depth], k, rng, dtype)
        self.ups = [ConvTranspose2d(c[i + 1], c[i], 2, 2, 0, rng=rng, init="he", dtype=dtype)
                    for i in range(spec.depth)]
        self.dec = [_block(2 * c[i], c[i], k, rng, dtype) for i in range(spec.depth)]
        self.head = Conv2d(c[0], spec.out_channels, 1, 1, 0, rng=rng, init="he", dtype=dtype)
        # the network input never needs a gradient
        self.enc[0].layers[0].need_input_grad = False
        self._splits = None

    def spec(self) -> dict:
        return {"kind": "unet", **self.spec_.to_dict()}

    def named_layers(self):
        for i, blk in enumerate(self.enc):
            yield from blk.named_layers(f"enc{i}.")
        yield from self.bottom.named_layers("bottom.")
        for i in range(self.spec_.depth):
            yield f"up{i}", self.ups[i]
            yield from self.dec[i].named_layers(f"dec{i}.")
        yield "head", self.head

    def train(self, mode=True):
        for _, layer in self.named_layers():
            layer.training = mode
        return self

    def eval(self):
        return self.train(False)

    def forward(self, x):
        if x.shape[1] != self.spec_.in_channels:
            raise NNError(f"U-Net expects {self.spec_.in_channels} channels, got {x.shape[1]}")
        f = 2 ** self.spec_.depth
        if x.shape[2] % f or x.shape[3] % f:
            raise NNError(f"spatial dims {x.shape[2:]} not divisible by {f}")
        skips = []
        for blk, pool in zip(self.enc, self.pools):
            x = blk.forward(x)
            skips.append(x)
            x = pool.forward(x)
        x = self.bottom.forward(x)
        splits = []
        for i in reversed(range(self.spec_.depth)):
            x, s = concat_skip(skips[i], self.ups[i].forward(x))
            splits.append(s)
            x = self.dec[i].forward(x)
        self._splits = splits
        return self.head.forward(x)

    def backward(self, dy):
        if self._splits is None:
            raise NNError("unet: backward called before forward")
        splits, self._splits = self._splits, None
        d = self.head.backward(dy)
        dskips = [None] * self.spec_.depth
        # decoders ran deepest first, so unwind from the shallowest
        for i in range(self.spec_.depth):
            d = self.dec[i].backward(d)
            dskips[i], d = concat_skip_backward(d, splits[self.spec_.depth - 1 - i])
            d = self.ups[i].backward(d)
        d = self.bottom.backward(d)
        for i in reversed(range(self.spec_.depth)):
            d = self.pools[i].backward(d) + dskips[i]
            d = self.enc[i].backward(d)
        return d


def build_unet(spec: UnetSpec, seed=0, dtype=np.float32) -> UNet:
    return UNet(spec, seed, dtype)


def to_tensor(images) -> np.ndarray:
    """(N, x, z, C) image stacks to (N, C, z, x) tensors."""
    return np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 2, 1))


def from_tensor(t) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(t).transpose(0, 3, 2, 1))


def _norm_stats(a):
    mean = a.mean(axis=(0, 2, 3))
    std = a.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.where(std > 1e-6, std, 1.0).astype(np.float32)


def _scale(a, mean, std):
    return (a - mean[None, :, None, None]) / std[None, :, None, None]


class UNetQuantifier(RegressorMixin, BaseEstimator):
    """Image-to-image regressor on ``(N, x, z, channels)`` arrays.

    Inputs and targets are standardised per channel with training-set
    statistics.  With validation data the parameters of the epoch with the
    lowest validation MSE are kept; ``target_mse`` stops training early once
    the training-batch loss falls below it.
    """

    def __init__(self, depth=4, base_channels=32, convs_per_block=2, epochs=10, batch_size=4, lr=2e-4,
                 beta1=0.9, max_steps=None, target_mse=None, random_state=0):
        self.depth = depth
        self.base_channels = base_channels
        self.convs_per_block = convs_per_block
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.max_steps = max_steps
        self.target_mse = target_mse
        self.random_state = random_state

    def _unet_spec(self, shape):
        return UnetSpec(in_channels=shape[3], out_channels=shape[3], image_shape=shape[1:3], depth=self.depth,
                        base_channels=self.base_channels, convs_per_block=self.convs_per_block)

    def fit(self, X, y, X_val=None, y_val=None, log=None):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.float32)
        if X.ndim != 4 or X.shape[:3] != y.shape[:3]:
            raise ValueError(f"expected matching (N, x, z, C) arrays, got {X.shape} and {y.shape}")
        seed = int(self.random_state or 0)
        self.spec_ = self._unet_spec(X.shape)
        self.net_ = build_unet(self.spec_, seed)
        xt, yt = to_tensor(X), to_tensor(y)
        self.x_mean_, self.x_std_ = _norm_stats(xt)
        self.y_mean_, self.y_std_ = _norm_stats(yt)
        xt = _scale(xt, self.x_mean_, self.x_std_)
        yt = _scale(yt, self.y_mean_, self.y_std_)
        y_var = (self.y_std_ ** 2)[None, :, None, None]
        has_val = X_val is not None and len(X_val) > 0
        if has_val:
            xv = _scale(to_tensor(X_val), self.x_mean_, self.x_std_)
            yv = np.asarray(y_val, dtype=np.float32)
        rng = np.random.default_rng([seed, 2])
        opt = AdamState(lr=self.lr, beta1=self.beta1)
        self.history_ = []
        self.best_val_ = np.inf
        best_state = None
        step = 0
        done = False
        self.n_steps_ = 0
        for epoch in range(self.epochs):
            self.net_.train()
            perm = rng.permutation(len(xt))
            losses = []
            for start in range(0, len(xt), self.batch_size):
                idx = np.sort(perm[start : start + self.batch_size])
                out = self.net_.forward(xt[idx])
                loss, grad = mse_loss(out, yt[idx])
                if not np.isfinite(loss):
                    raise UnetTrainingError(f"non-finite loss at epoch {epoch}, step {step}")
                self.net_.backward(grad)
                adam_step(named_parameters(self.net_), named_gradients(self.net_), opt)
                # tracked in the original log-absorption units
                loss = float(np.mean((out - yt[idx]) ** 2 * y_var))
                losses.append(loss)
                step += 1
                if (self.max_steps is not None and step >= self.max_steps) or (
                        self.target_mse is not None and loss < self.target_mse):
                    done = True
                    break
            train_mse = float(np.mean(losses))
            val_mse = float("nan")
            if has_val:
                val_mse = float(np.mean((self._predict_scaled(xv) - yv) ** 2))
                if val_mse < self.best_val_:
                    self.best_val_ = val_mse
                    best_state = self.get_state()
            self.history_.append((epoch, train_mse, val_mse))
            if log:
                log(f"epoch {epoch} train_mse {train_mse:.5f} val_mse {val_mse:.5f}")
            if done:
                break
        self.n_steps_ = step
        self.last_loss_ = losses[-1] if losses else float("nan")
        if best_state is not None:
            self.set_state(best_state)
        self.net_.eval()
        return self

    def _predict_scaled(self, xt, batch=8):
        self.net_.eval()
        outs = []
        for start in range(0, len(xt), batch):
            out = self.net_.forward(xt[start : start + batch])
            self.net_._splits = None
            outs.append(out * self.y_std_[None, :, None, None] + self.y_mean_[None, :, None, None])
        return from_tensor(np.concatenate(outs))

    def predict(self, X):
        X = np.asarray(X, dtype=np.float32)
        single = X.ndim == 3
        if single:
            X = X[None]
        if X.shape[1:] != tuple(self.spec_.image_shape) + (self.spec_.in_channels,):
            raise ValueError(f"input shape {X.shape[1:]} does not match the network "
                             f"{tuple(self.spec_.image_shape) + (self.spec_.in_channels,)}")
        out = self._predict_scaled(_scale(to_tensor(X), self.x_mean_, self.x_std_))
        return out[0] if single else out

    def score(self, X, y, sample_weight=None):
        """Negative mean squared error (higher is better)."""
        return -float(np.mean((self.predict(X) - np.asarray(y)) ** 2))

    # -- state ---------------------------------------------------------

    def get_state(self) -> dict:
        arrays = {k: v.copy() for k, v in {**named_parameters(self.net_), **named_buffers(self.net_)}.items()}
        arrays.update({"norm.x_mean": self.x_mean_, "norm.x_std": self.x_std_, "norm.y_mean": self.y_mean_,
                       "norm.y_std": self.y_std_})
        return arrays

    def set_state(self, arrays: dict) -> None:
        set_state(self.net_, arrays)
        self.x_mean_, self.x_std_ = arrays["norm.x_mean"], arrays["norm.x_std"]
        self.y_mean_, self.y_std_ = arrays["norm.y_mean"], arrays["norm.y_std"]

    def save(self, path, meta: dict | None = None) -> Path:
        info = {"params": self.get_params(), "history": [list(h) for h in self.history_],
                "best_val_mse": None if not np.isfinite(self.best_val_) else self.best_val_}
        info.update(meta or {})
        return save_checkpoint(path, self.net_.spec(), self.get_state(), info)

    @classmethod
    def load(cls, path) -> "UNetQuantifier":
        arch, arrays, meta = load_checkpoint(path)
        if arch.get("kind") != "unet":
            raise ValueError(f"{path}: not a U-Net checkpoint")
        arch = dict(arch)
        arch.pop("kind")
        model = cls(**meta.get("params", {}))
        model.spec_ = UnetSpec(**arch)
        model.net_ = build_unet(model.spec_)
        model.set_state(arrays)
        model.net_.eval()
        model.history_ = [tuple(h) for h in meta.get("history", [])]
        model.best_val_ = meta.get("best_val_mse") or np.inf
        return model


def write_unet_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mse", "val_mse"])
        for e, t, v in history:
            w.writerow([e, repr(t), repr(v)])


def load_split(dataset_dir, split: str):
    """Read ``<dataset_dir>/<split>/sample_*/`` into ``(X, y, masks, ids)`` arrays."""
    from ..geometry import load_labelmap
    from ..volume_io import load_volume

    xs, ys, masks, ids = [], [], [], []
    for d in sorted((Path(dataset_dir) / split).glob("sample_*")):
        x, _ = load_volume(d / "input.vol16")
        y, _ = load_volume(d / "gt_mua.vol16")
        xs.append(x)
        ys.append(y)
        masks.append(load_labelmap(d / "mask.png"))
        ids.append(json.loads((d / "meta.json").read_text())["id"])
    if not xs:
        return np.empty((0,)), np.empty((0,)), [], []
    return np.stack(xs), np.stack(ys), masks, ids


def train_unet(dataset_dir, epochs=10, lr=2e-4, seed=0, log=None, **params) -> UNetQuantifier:
    """Fit a :class:`UNetQuantifier` on a materialised dataset directory."""
    X, y, _, _ = load_split(dataset_dir, "train")
    if len(X) == 0:
        raise ValueError(f"no training samples under {dataset_dir}")
    Xv, yv, _, _ = load_split(dataset_dir, "val")
    model = UNetQuantifier(epochs=epochs, lr=lr, random_state=seed, **params)
    return model.fit(X, y, Xv if len(Xv) else None, yv if len(yv) else None, log=log)


def predict_mua(model, image) -> np.ndarray:
    """Estimated log-absorption image(s) for ``image`` of shape (x, z, C) or (N, x, z, C)."""
    if not isinstance(model, UNetQuantifier):
        model = UNetQuantifier.load(model)
    return model.predict(image)
