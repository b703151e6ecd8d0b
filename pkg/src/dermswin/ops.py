"""Neural-network operations on top of the tensor engine.

Each op computes its forward value with plain numpy and attaches a
hand-derived backward rule; numerical stability tricks (max subtraction,
log-sum-exp) live here so callers never need them.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import ShapeError, Tensor, _from_op

__all__ = [
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "depthwise_conv2d",
    "dropout",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalize along ``axis``; max is subtracted first so any finite
    input (including large masking offsets) stays overflow-free."""
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _from_op(out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _from_op(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine.

    ``eps`` sits inside the square root, so a constant input collapses to
    exactly zero rather than dividing by zero.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        return dx, dgamma, dbeta

    return _from_op(out, (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU x * Phi(x) in the Gaussian-CDF (erf) form."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def rule(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _from_op(out, (x,), rule)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Per-channel 2-d convolution of ``x`` (B, H, W, C) with ``kernel``
    (k, k, C), zero-padded so the spatial dimensions are preserved."""
    if x.ndim != 4 or kernel.ndim != 3:
        raise ShapeError(f"expected (B,H,W,C) input and (k,k,C) kernel, got {x.shape} and {kernel.shape}")
    k = kernel.shape[0]
    if kernel.shape[1] != k or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd side, got {kernel.shape}")
    if kernel.shape[2] != x.shape[3]:
        raise ShapeError(f"channel mismatch: input has {x.shape[3]} channels, kernel has {kernel.shape[2]}")
    if stride != 1:
        raise ShapeError("only stride 1 is supported")

    _, h, w, _ = x.shape
    pad = k // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for i in range(k):
        for j in range(k):
            out += padded[:, i : i + h, j : j + w, :] * kernel.data[i, j, :]

    def rule(g):
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kernel.data)
        for i in range(k):
            for j in range(k):
                gpad[:, i : i + h, j : j + w, :] += g * kernel.data[i, j, :]
                gk[i, j, :] = (padded[:, i : i + h, j : j + w, :] * g).sum(axis=(0, 1, 2))
        return gpad[:, pad : pad + h, pad : pad + w, :], gk

    return _from_op(out, (x, kernel), rule)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero entries with probability ``p`` and rescale the
    survivors by 1/(1-p) so the expectation is unchanged."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def rule(g):
        return (g * mask,)

    return _from_op(x.data * mask, (x,), rule)
