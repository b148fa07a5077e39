"""Mean-reduced losses returning ``(value, d value / d pred)``."""

from __future__ import annotations

import numpy as np

from .layers import NNError

BCE_EPS = 1e-7


def _check(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype if pred.dtype.kind == "f" else np.float64)
    if pred.shape != target.shape:
        raise NNError(f"loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    return pred, target


def bce_loss(pred, target, eps: float = BCE_EPS):
    """Binary cross-entropy of probabilities ``pred`` against ``target``.

    ``pred`` is clamped to ``[eps, 1 - eps]``; the gradient is taken with
    respect to the unclamped input and vanishes where the clamp is active.
    """
    pred, target = _check(pred, target)
    p = np.clip(pred, eps, 1.0 - eps)
    n = p.size
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    grad = (p - target) / (p * (1.0 - p)) / n
    grad = np.where((pred < eps) | (pred > 1.0 - eps), 0.0, grad).astype(pred.dtype)
    return float(loss), grad


def mse_loss(pred, target):
    pred, target = _check(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff
