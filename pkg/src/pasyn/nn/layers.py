"""Layers with explicit forward/backward passes on NCHW arrays.

Every layer caches what its backward pass needs during ``forward``.
Parameters live in ``layer.params`` and gradients land in ``layer.grads``
(same keys) after ``backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NNError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.training = True
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _take_cache(self):
        if self._cache is None:
            raise NNError(f"{self.kind}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def spec(self) -> dict:
        return {"kind": self.kind}

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


# --------------------------------------------------------------------------
# convolution helpers


def _im2col(xp, k, stride, ho, wo):
    """(N, C, Hp, Wp) -> (N, C*k*k, Ho*Wo), rows ordered (c, ki, kj)."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    # (N, C, k, k, Ho, Wo) keeps the innermost copy runs contiguous
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)


def _col2im(cols, shape, k, stride, ho, wo):
    """Adjoint of :func:`_im2col`; ``shape`` is the padded input shape."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, ho, wo)
    he = stride * (ho - 1) + 1
    we = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + he : stride, j : j + we : stride] += cols[:, :, i, j]
    return out


def _batched_outer(a, b):
    """sum_n a[n] @ b[n].T for (N, P, L) and (N, Q, L)."""
    acc = a[0] @ b[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ b[i].T
    return acc


def _init_weight(rng, shape, init, fan_in, dtype):
    if init == "dcgan":
        return rng.normal(0.0, 0.02, shape).astype(dtype)
    if init == "he":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)
    raise NNError(f"unknown init {init!r}")


class Conv2d(Layer):
    """Cross-correlation with square kernels; weight shape (out, in, k, k)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, bias=True,
                 rng=None, init="dcgan", dtype=np.float32):
        super().__init__()
        if stride < 1:
            raise NNError("conv stride must be >= 1")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.bias = stride, padding, bias
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _init_weight(rng, (out_ch, in_ch, kernel, kernel), init,
                                             in_ch * kernel * kernel, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.need_input_grad = True

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}

    def output_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise NNError(f"conv2d expects {self.in_ch} channels, got {c}")
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise NNError(f"conv2d input {h}x{w} too small for kernel {self.kernel}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _im2col(xp, self.kernel, self.stride, ho, wo)
        out = self.params["weight"].reshape(self.out_ch, -1) @ cols
        if self.bias:
            out += self.params["bias"][None, :, None]
        self._cache = (cols, xp.shape, ho, wo)
        return out.reshape(n, self.out_ch, ho, wo)

    def backward(self, dy):
        cols, xp_shape, ho, wo = self._take_cache()
        d2 = dy.reshape(dy.shape[0], self.out_ch, -1)
        self.grads["weight"] = _batched_outer(d2, cols).reshape(self.params["weight"].shape)
        if self.bias:
            self.grads["bias"] = d2.sum(axis=(0, 2))
        if not self.need_input_grad:
            return None
        dcols = self.params["weight"].reshape(self.out_ch, -1).T @ d2
        dxp = _col2im(dcols, xp_shape, self.kernel, self.stride, ho, wo)
        p = self.padding
        return dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp


class ConvTranspose2d(Layer):
    """Gradient of :class:`Conv2d` with respect to its input; weight (in, out, k, k)."""

    kind = "transposed-conv2d"

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, padding=1, bias=True,
                 rng=None, init="dcgan", dtype=np.float32):
        super().__init__()
        if stride < 1:
            raise NNError("stride must be >= 1")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.bias = stride, padding, bias
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = _init_weight(rng, (in_ch, out_ch, kernel, kernel), init,
                                             in_ch * kernel * kernel, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding, "bias": self.bias}

    def output_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise NNError(f"transposed-conv2d expects {self.in_ch} channels, got {c}")
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = self.output_shape(h, w)
        if ho < 1 or wo < 1:
            raise NNError("transposed-conv2d output would be empty")
        x2 = x.reshape(n, c, h * w)
        cols = self.params["weight"].reshape(c, -1).T @ x2
        full_shape = (n, self.out_ch, ho + 2 * p, wo + 2 * p)
        full = _col2im(cols, full_shape, k, s, h, w)
        out = full[:, :, p : p + ho, p : p + wo]
        if self.bias:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = (x2, x.shape, full_shape)
        return np.ascontiguousarray(out)

    def backward(self, dy):
        x2, x_shape, full_shape = self._take_cache()
        n, c, h, w = x_shape
        k, s, p = self.kernel, self.stride, self.padding
        if self.bias:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        dyp = np.pad(dy, ((0, 0), (0, 0), (p, p), (p, p))) if p else dy
        dcols = _im2col(dyp, k, s, h, w)
        self.grads["weight"] = _batched_outer(x2, dcols).reshape(self.params["weight"].shape)
        dx = self.params["weight"].reshape(c, -1) @ dcols
        return dx.reshape(n, c, h, w)


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, channels, momentum=0.1, eps=1e-5, rng=None, init="dcgan", dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        if init == "dcgan" and rng is not None:
            gamma = rng.normal(1.0, 0.02, channels)
        else:
            gamma = np.ones(channels)
        self.params["gamma"] = gamma.astype(dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise NNError(f"batchnorm2d expects {self.channels} channels, got {x.shape[1]}")
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            mom = self.momentum
            self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"] + mom * mean).astype(
                self.buffers["running_mean"].dtype)
            self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"] + mom * unbiased).astype(
                self.buffers["running_var"].dtype)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._cache = (xhat, inv, self.training)
        return (g * xhat + b).astype(x.dtype, copy=False)

    def normalize(self, x):
        """Pre-affine output in training mode (batch statistics)."""
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        return (x - mean) / np.sqrt(var + self.eps)

    def backward(self, dy):
        xhat, inv, training = self._take_cache()
        g = self.params["gamma"]
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        dxhat = dy * g[None, :, None, None]
        if not training:
            return dxhat * inv[None, :, None, None]
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (dxhat - mean_d - xhat * mean_dx) * inv[None, :, None, None]


class Dense(Layer):
    """Fully connected map from the flattened input to an ``(C, H, W)`` output.

    Used as the latent projection of a generator and as the scoring head of a
    discriminator.
    """

    kind = "dense"

    def __init__(self, in_features, out_shape, bias=True, rng=None, init="dcgan", dtype=np.float32):
        super().__init__()
        self.in_features = int(in_features)
        self.out_shape = tuple(int(v) for v in out_shape)
        self.bias = bias
        rng = rng if rng is not None else np.random.default_rng(0)
        n_out = int(np.prod(self.out_shape))
        self.params["weight"] = _init_weight(rng, (self.in_features, n_out), init, self.in_features, dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_shape": list(self.out_shape),
                "bias": self.bias}

    def forward(self, x):
        n = x.shape[0]
        x2 = x.reshape(n, -1)
        if x2.shape[1] != self.in_features:
            raise NNError(f"dense expects {self.in_features} input features, got {x2.shape[1]}")
        out = x2 @ self.params["weight"]
        if self.bias:
            out += self.params["bias"]
        self._cache = (x2, x.shape)
        return out.reshape((n,) + self.out_shape)

    def backward(self, dy):
        x2, shape = self._take_cache()
        d2 = dy.reshape(shape[0], -1)
        self.grads["weight"] = x2.T @ d2
        if self.bias:
            self.grads["bias"] = d2.sum(axis=0)
        return (d2 @ self.params["weight"].T).reshape(shape)


class Crop(Layer):
    """Keep the top-left ``(height, width)`` window; backward zero-pads."""

    kind = "crop"

    def __init__(self, height, width):
        super().__init__()
        self.height, self.width = int(height), int(width)

    def spec(self):
        return {"kind": self.kind, "height": self.height, "width": self.width}

    def forward(self, x):
        if x.shape[2] < self.height or x.shape[3] < self.width:
            raise NNError(f"cannot crop {x.shape[2:]} to {(self.height, self.width)}")
        self._cache = x.shape
        return np.ascontiguousarray(x[:, :, : self.height, : self.width])

    def backward(self, dy):
        shape = self._take_cache()
        out = np.zeros(shape, dtype=dy.dtype)
        out[:, :, : self.height, : self.width] = dy
        return out


# --------------------------------------------------------------------------
# pointwise


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, alpha=0.2):
        super().__init__()
        self.alpha = alpha

    def spec(self):
        return {"kind": self.kind, "alpha": self.alpha}

    def forward(self, x):
        scale = np.where(x > 0, 1.0, self.alpha).astype(x.dtype)
        self._cache = scale
        return x * scale

    def backward(self, dy):
        return dy * self._take_cache()


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * (1.0 - y * y)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return dy * y * (1.0 - y)


class ChannelSoftmax(Layer):
    """Softmax across the channel axis at every pixel."""

    kind = "channel-softmax"

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._take_cache()
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise NNError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        idx, shape = self._take_cache()
        n, c, h, w = shape
        out = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(out, idx[..., None], dy[..., None], axis=-1)
        return out.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class UpsampleNearest2x(Layer):
    kind = "upsample-nearest2x"

    def forward(self, x):
        self._cache = True
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dy):
        self._take_cache()
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_skip(a, b):
    """Channel concatenation used by skip connections; returns the split point."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise NNError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_skip_backward(dy, split):
    return dy[:, :split], dy[:, split:]


class ConcatSkip(Layer):
    """Two-input channel concatenation; ``forward`` takes a pair."""

    kind = "concat-skip"

    def forward(self, pair):
        out, split = concat_skip(*pair)
        self._cache = split
        return out

    def backward(self, dy):
        return concat_skip_backward(dy, self._take_cache())


# --------------------------------------------------------------------------
# containers


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def spec(self):
        return {"kind": self.kind, "layers": [layer.spec() for layer in self.layers]}

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            name = f"{prefix}{i}"
            if isinstance(layer, Sequential):
                yield from layer.named_layers(name + ".")
            else:
                yield name, layer

    def train(self, mode=True):
        for _, layer in self.named_layers():
            layer.training = mode
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, layer in self.named_layers():
            layer.astype(dtype)
        return self


def named_parameters(net) -> dict:
    """Flat ``{name: array}`` view of a network's parameters (shared, not copied)."""
    out = {}
    for lname, layer in net.named_layers():
        for k, v in layer.params.items():
            out[f"{lname}.{k}"] = v
    return out


def named_gradients(net) -> dict:
    out = {}
    for lname, layer in net.named_layers():
        for k in layer.params:
            out[f"{lname}.{k}"] = layer.grads[k]
    return out


def named_buffers(net) -> dict:
    out = {}
    for lname, layer in net.named_layers():
        for k, v in layer.buffers.items():
            out[f"{lname}.{k}"] = v
    return out


def set_state(net, arrays: dict) -> None:
    """Load parameters and buffers by name (in place)."""
    for lname, layer in net.named_layers():
        for store in (layer.params, layer.buffers):
            for k in store:
                key = f"{lname}.{k}"
                if key not in arrays:
                    raise NNError(f"missing array {key!r}")
                if arrays[key].shape != store[k].shape:
                    raise NNError(f"{key}: shape {arrays[key].shape} != {store[k].shape}")
                store[k] = arrays[key].astype(store[k].dtype)


_LAYER_TYPES = {cls.kind: cls for cls in (Conv2d, ConvTranspose2d, BatchNorm2d, Dense, Crop, ReLU, LeakyReLU,
                                          Tanh, Sigmoid, ChannelSoftmax, MaxPool2x2, UpsampleNearest2x,
                                          ConcatSkip)}


def build_layer(spec: dict, rng=None, dtype=np.float32):
    """Instantiate a layer from its ``spec()`` dictionary."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "sequential":
        return Sequential([build_layer(s, rng, dtype) for s in spec["layers"]])
    if kind not in _LAYER_TYPES:
        raise NNError(f"unknown layer kind {kind!r}")
    cls = _LAYER_TYPES[kind]
    if cls in (Conv2d, ConvTranspose2d, BatchNorm2d, Dense):
        return cls(**spec, rng=rng, dtype=dtype)
    return cls(**spec)
