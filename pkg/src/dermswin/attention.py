"""Shifted-window multi-head self-attention.

Attention is evaluated inside non-overlapping M x M token windows, so the
score tensor grows with window size, not image size. On alternating blocks
the grid is cyclically rolled by half a window before partitioning; tokens
that wrap around then share a window with tokens from the opposite edge, and
an additive region-id mask keeps them from attending to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import init
from .embedding import TokenSequence
from .errors import ConfigError
from .ops import layer_norm, softmax
from .tensor import ShapeError, Tensor, roll

MASK_NEG = -1e9  # finite stand-in for -inf; exp() underflows to exactly 0


@dataclass
class AttentionParams:
    w_query: Tensor  # (d, d)
    w_key: Tensor
    w_value: Tensor
    w_out: Tensor
    num_heads: int

    def __post_init__(self):
        d = self.w_query.shape[0]
        for name in ("w_query", "w_key", "w_value", "w_out"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be square ({d},{d}), got {w.shape}")
        if self.num_heads <= 0 or d % self.num_heads:
            raise ConfigError(f"embed dim {d} is not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return self.w_query.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    shift: int
    grid: tuple[int, int]

    def __post_init__(self):
        gh, gw = self.grid
        m = self.window_size
        if m <= 0:
            raise ConfigError("window_size must be positive")
        if gh % m or gw % m:
            raise ConfigError(f"grid {gh}x{gw} is not divisible by window size {m}")
        if self.shift not in (0, m // 2):
            raise ConfigError(f"shift must be 0 or {m // 2} for window size {m}, got {self.shift}")

    @property
    def num_windows(self) -> int:
        return (self.grid[0] // self.window_size) * (self.grid[1] // self.window_size)

    @property
    def tokens_per_window(self) -> int:
        return self.window_size * self.window_size


def init_attention_params(dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32) -> AttentionParams:
    def w():
        return init.glorot_uniform((dim, dim), dim, dim, rng, dtype)

    return AttentionParams(w(), w(), w(), w(), num_heads)


def window_partition(tokens: Tensor, spec: WindowSpec) -> Tensor:
    """(B, H_p*W_p, d) -> (B*nW, M*M, d), windows and positions row-major."""
    b, t, d = tokens.shape
    gh, gw = spec.grid
    if t != gh * gw:
        raise ShapeError(f"{t} tokens do not fill grid {gh}x{gw}")
    m = spec.window_size
    x = tokens.reshape((b, gh // m, m, gw // m, m, d))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b * spec.num_windows, m * m, d))


def window_reverse(windows: Tensor, spec: WindowSpec, batch: int) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    gh, gw = spec.grid
    m = spec.window_size
    d = windows.shape[-1]
    x = windows.reshape((batch, gh // m, gw // m, m, m, d))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((batch, gh * gw, d))


def cyclic_shift(tokens: Tensor, grid: tuple[int, int], s: int) -> Tensor:
    """Roll the token grid by (-s, -s) so windows straddle old boundaries."""
    if s == 0:
        return tokens
    b, t, d = tokens.shape
    gh, gw = grid
    x = tokens.reshape((b, gh, gw, d))
    x = roll(x, (-s, -s), axis=(1, 2))
    return x.reshape((b, t, d))


def cyclic_unshift(tokens: Tensor, grid: tuple[int, int], s: int) -> Tensor:
    if s == 0:
        return tokens
    b, t, d = tokens.shape
    gh, gw = grid
    x = tokens.reshape((b, gh, gw, d))
    x = roll(x, (s, s), axis=(1, 2))
    return x.reshape((b, t, d))


def region_ids(spec: WindowSpec) -> np.ndarray:
    """Pre-shift region label for every post-shift grid position, (H_p, W_p).

    After rolling by (-s, -s), rows split into three bands: the interior
    [0, H-M), the band [H-M, H-s) still inside its original window column,
    and the wrapped band [H-s, H). Same for columns; the cross product gives
    nine regions whose members may attend to each other.
    """
    gh, gw = spec.grid
    m, s = spec.window_size, spec.shift
    ids = np.zeros((gh, gw), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    label = 0
    for hs in bands:
        for ws in bands:
            ids[hs, ws] = label
            label += 1
    return ids


def shifted_attention_mask(spec: WindowSpec) -> np.ndarray:
    """(nW, M*M, M*M) additive mask: 0 for same-region pairs, -1e9 otherwise."""
    if spec.shift <= 0:
        raise ConfigError("attention mask is only defined for shifted windows (s > 0)")
    m = spec.window_size
    ids = region_ids(spec)
    gh, gw = spec.grid
    windows = ids.reshape(gh // m, m, gw // m, m).transpose(0, 2, 1, 3).reshape(spec.num_windows, m * m)
    same = windows[:, :, None] == windows[:, None, :]
    return np.where(same, 0.0, MASK_NEG)


def multi_head_attention(
    z: Tensor,
    params: AttentionParams,
    mask: Optional[np.ndarray] = None,
    stats: Optional[dict] = None,
) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, then W_O.

    `mask` is an additive constant of shape (nW, T, T); when the leading
    batch axis of `z` is B*nW the mask is tiled across B.
    """
    bstar, t, d = z.shape
    h = params.num_heads
    dk = params.head_dim
    if d != params.dim:
        raise ShapeError(f"token dim {d} does not match weights ({params.dim})")

    def split_heads(x: Tensor) -> Tensor:
        return x.reshape((bstar, t, h, dk)).transpose((0, 2, 1, 3))

    q = split_heads(z @ params.w_query)
    k = split_heads(z @ params.w_key)
    v = split_heads(z @ params.w_value)

    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dk))
    if mask is not None:
        nw = mask.shape[0]
        if bstar % nw:
            raise ShapeError(f"batch axis {bstar} is not a multiple of {nw} windows")
        tiled = np.tile(mask, (bstar // nw, 1, 1))[:, None, :, :]
        scores = scores + Tensor(tiled.astype(scores.data.dtype))
    weights = softmax(scores, axis=-1)
    if stats is not None:
        stats["scores_shape"] = scores.shape
        stats["weights"] = weights.data

    out = (weights @ v).transpose((0, 2, 1, 3)).reshape((bstar, t, d))
    return out @ params.w_out


def attention_sublayer(
    seq: TokenSequence,
    params: AttentionParams,
    gamma: Tensor,
    beta: Tensor,
    spec: WindowSpec,
    eps: float = 1e-5,
    stats: Optional[dict] = None,
) -> TokenSequence:
    """Pre-norm residual attention: z + WindowMHA(LN(z)).

    Sequences carrying a class token take the global path (no partition, no
    mask); the model config restricts that mode to full-grid windows.
    """
    x = seq.tokens
    normed = layer_norm(x, gamma, beta, eps=eps)
    if seq.has_cls:
        out = multi_head_attention(normed, params, stats=stats)
    else:
        if spec.grid != seq.grid:
            raise ShapeError(f"window spec grid {spec.grid} != sequence grid {seq.grid}")
        s = spec.shift
        shifted = cyclic_shift(normed, seq.grid, s)
        windows = window_partition(shifted, spec)
        mask = shifted_attention_mask(spec) if s > 0 else None
        att = multi_head_attention(windows, params, mask=mask, stats=stats)
        merged = window_reverse(att, spec, seq.batch)
        out = cyclic_unshift(merged, seq.grid, s)
    return seq.with_tokens(x + out)
