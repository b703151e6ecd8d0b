"""Inverse residual sub-layer and the plain FFN baseline.

The inverse residual block widens channels pointwise, mixes spatially with a
depthwise convolution over the token grid, then projects back down, with a
skip around the whole thing: x + project(dwconv(expand(x))). GELU follows the
expansion and the convolution; the projection stays linear (inverted
bottleneck convention). A class token, having no grid position, bypasses the
convolution stage and takes only the pointwise path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import init
from .embedding import TokenSequence
from .errors import ConfigError
from .ops import depthwise_conv2d, gelu, layer_norm
from .tensor import ShapeError, Tensor, concat


@dataclass
class FFNParams:
    w1: Tensor  # (d, m)
    b1: Tensor  # (m,)
    w2: Tensor  # (m, d)
    b2: Tensor  # (d,)

    def __post_init__(self):
        d, m = self.w1.shape
        if self.w2.shape != (m, d):
            raise ShapeError(f"w2 must be ({m},{d}) to return to the input width, got {self.w2.shape}")
        if self.b1.shape != (m,) or self.b2.shape != (d,):
            raise ShapeError("bias shapes must match layer widths")


@dataclass
class IRBParams:
    expand_w: Tensor  # (d, r*d)
    expand_b: Tensor  # (r*d,)
    dw_kernel: Tensor  # (k, k, r*d)
    project_w: Tensor  # (r*d, d)
    project_b: Tensor  # (d,)

    def __post_init__(self):
        d, rd = self.expand_w.shape
        if rd % d or rd < d:
            raise ConfigError(f"expansion width {rd} must be a multiple (>= 1) of input dim {d}")
        k = self.dw_kernel.shape[0]
        if self.dw_kernel.shape != (k, k, rd):
            raise ShapeError(f"dwconv kernel must be (k,k,{rd}), got {self.dw_kernel.shape}")
        if k % 2 == 0:
            raise ConfigError(f"dwconv kernel size must be odd, got {k}")
        if self.project_w.shape != (rd, d):
            raise ShapeError(
                f"projection must restore input dim ({rd},{d}), got {self.project_w.shape}"
            )
        if self.expand_b.shape != (rd,) or self.project_b.shape != (d,):
            raise ShapeError("bias shapes must match layer widths")

    @property
    def dim(self) -> int:
        return self.expand_w.shape[0]

    @property
    def expansion(self) -> int:
        return self.expand_w.shape[1] // self.expand_w.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.dw_kernel.shape[0]


def init_ffn_params(dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> FFNParams:
    return FFNParams(
        init.glorot_uniform((dim, hidden), dim, hidden, rng, dtype),
        init.zeros_param((hidden,), dtype),
        init.glorot_uniform((hidden, dim), hidden, dim, rng, dtype),
        init.zeros_param((dim,), dtype),
    )


def init_irb_params(dim: int, expansion: int, kernel: int, rng: np.random.Generator, dtype=np.float32) -> IRBParams:
    rd = expansion * dim
    return IRBParams(
        init.glorot_uniform((dim, rd), dim, rd, rng, dtype),
        init.zeros_param((rd,), dtype),
        init.glorot_uniform((kernel, kernel, rd), kernel * kernel, kernel * kernel, rng, dtype),
        init.glorot_uniform((rd, dim), rd, dim, rng, dtype),
        init.zeros_param((dim,), dtype),
    )


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    """gelu(x W1 + b1) W2 + b2, applied to the last axis."""
    return gelu(x @ params.w1 + params.b1) @ params.w2 + params.b2


def irb(
    seq: TokenSequence,
    params: IRBParams,
    use_activation: bool = True,
    inner_skip: bool = True,
) -> TokenSequence:
    """x + project(act(dwconv(act(expand(x))))) over the token grid.

    `use_activation=False` makes the block purely linear for algebraic
    checks; `inner_skip=False` drops the internal residual (ablation).
    """
    x = seq.tokens
    b, t, d = x.shape
    gh, gw = seq.grid
    expected = gh * gw + (1 if seq.has_cls else 0)
    if t != expected or d != params.dim:
        raise ShapeError(
            f"tokens {x.shape} do not fit grid {seq.grid} (cls={seq.has_cls}) with dim {params.dim}"
        )

    h = x @ params.expand_w + params.expand_b
    if use_activation:
        h = gelu(h)

    if seq.has_cls:
        cls_part, spatial = h[:, :1], h[:, 1:]
    else:
        cls_part, spatial = None, h

    rd = params.expand_w.shape[1]
    img = spatial.reshape((b, gh, gw, rd))
    img = depthwise_conv2d(img, params.dw_kernel)
    if use_activation:
        img = gelu(img)
    spatial = img.reshape((b, gh * gw, rd))

    mixed = spatial if cls_part is None else concat([cls_part, spatial], axis=1)
    y = mixed @ params.project_w + params.project_b
    return seq.with_tokens(x + y if inner_skip else y)


def block_output(
    seq: TokenSequence,
    gamma: Tensor,
    beta: Tensor,
    params,
    kind: str = "irb",
    eps: float = 1e-5,
    use_activation: bool = True,
    inner_skip: bool = True,
) -> TokenSequence:
    """Second half of a block: z + sublayer(LN(z)).

    With `kind="irb"` the sublayer keeps its own internal skip (unless
    disabled), so the composition is z + LN(z) + project(dwconv(expand(LN(z)))).
    """
    normed = seq.with_tokens(layer_norm(seq.tokens, gamma, beta, eps=eps))
    if kind == "irb":
        sub = irb(normed, params, use_activation=use_activation, inner_skip=inner_skip)
        out = sub.tokens
    elif kind == "ffn":
        out = ffn(normed.tokens, params)
    else:
        raise ConfigError(f"unknown sublayer kind {kind!r}")
    return seq.with_tokens(seq.tokens + out)
