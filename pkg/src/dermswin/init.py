"""Parameter initializers. All draws flow through an explicit Generator."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def trunc_normal(shape, std: float, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Normal draw with resampling of anything beyond two standard deviations."""
    data = rng.normal(0.0, std, size=shape)
    bad = np.abs(data) > 2.0 * std
    while bad.any():
        data[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(data) > 2.0 * std
    return Tensor(data.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
