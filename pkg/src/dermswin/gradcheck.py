"""Central finite-difference gradient verification.

The numeric side perturbs raw parameter storage in place and re-runs the
forward closure with recording disabled, so it stays independent of every
backward rule it is used to check. Use 64-bit parameters; at 32-bit the
cancellation noise in (f(x+h) - f(x-h)) swamps the signal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


def numeric_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``param``."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(param.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-element relative error, with tiny entries measured against
    ``floor`` so finite-difference noise on near-zero gradients cannot blow
    the ratio up."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((diff / scale).max()) if diff.size else 0.0


@dataclass
class GradCheckResult:
    tol: float
    per_param: list[tuple[str, float]] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.per_param), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def worst(self) -> tuple[str, float]:
        return max(self.per_param, key=lambda item: item[1])


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild the forward computation from the live parameter
    storage on every call.
    """
    tensors = [p for _, p in params]
    zero_grads(tensors)
    loss = f()
    backward(loss)
    result = GradCheckResult(tol=tol)
    for name, param in params:
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = numeric_gradient(f, param, h=h)
        result.per_param.append((name, max_relative_error(analytic, numeric, floor=floor)))
    return result
