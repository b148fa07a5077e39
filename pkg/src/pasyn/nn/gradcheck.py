"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .layers import NNError, named_gradients, named_parameters


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude.

    Element-wise ratios explode where the true gradient is ~0, so the
    deviation is normalised per parameter tensor instead.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def projection_loss(out_shape, rng):
    """Linear loss ``sum(out * R)`` with a fixed random ``R``."""
    r = rng.standard_normal(out_shape)

    def loss(out):
        return float(np.sum(out * r)), r.astype(out.dtype)

    return loss


def grad_check(net, x, loss=None, h: float = 1e-5, max_elements: int | None = None,
               check_input: bool = False, seed: int = 0) -> list:
    """Compare backward() with central differences.

    Returns ``[(name, max_relative_error), ...]`` sorted by error, largest
    first.  The network must hold float64 parameters; ``loss`` maps the
    network output to ``(value, grad)`` and defaults to a random linear
    projection.  ``max_elements`` subsamples large parameter tensors.
    """
    x = np.asarray(x)
    params = named_parameters(net)
    if any(p.dtype != np.float64 for p in params.values()) or x.dtype != np.float64:
        raise NNError("grad_check requires float64 parameters and input")
    rng = np.random.default_rng(seed)
    if loss is None:
        loss = projection_loss(net.forward(x).shape, rng)

    def value(inp):
        return loss(net.forward(inp))[0]

    _, dout = loss(net.forward(x))
    dx = net.backward(dout)
    grads = {k: g.copy() for k, g in named_gradients(net).items()}

    targets = [(k, params[k], grads[k]) for k in params]
    if check_input:
        targets.append(("input", x, dx))
    report = []
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = rng.choice(flat.size, size=max_elements, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = value(x)
            flat[i] = old - h
            fm = value(x)
            flat[i] = old
            numeric[j] = (fp - fm) / (2.0 * h)
        report.append((name, relative_error(analytic.reshape(-1)[idx], numeric)))
    report.sort(key=lambda t: t[1], reverse=True)
    return report
