"""Full classifier: embedding, stacked attention/IRB blocks, head.

Blocks alternate the window shift (0 on even block indices, half the window
on odd ones) so that information crosses window boundaries every other
block. When a stage covers the whole grid with a single window the shift is
suppressed: rolling a lone window only fragments attention that is already
global. Optional patch merging halves the grid and doubles the channel
width between stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import init
from .attention import AttentionParams, WindowSpec, attention_sublayer, init_attention_params
from .embedding import (
    EmbeddingParams,
    PatchConfig,
    TokenSequence,
    embed,
    init_embedding_params,
    patchify,
)
from .errors import ConfigError
from .irb import FFNParams, IRBParams, block_output, init_ffn_params, init_irb_params
from .ops import dropout, layer_norm
from .tensor import ShapeError, Tensor, concat

SUBLAYER_KINDS = ("irb", "ffn")


@dataclass(frozen=True)
class ModelConfig:
    patch: PatchConfig
    depths: tuple[int, ...] = (4,)
    heads: tuple[int, ...] = (3,)
    window: int = 7
    expansion: int = 4
    kernel: int = 3
    num_classes: int = 5
    head_dropout: float = 0.3
    sublayer_kind: str = "irb"
    stage_merging: bool = False
    irb_inner_skip: bool = True

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.depths) != len(self.heads):
            raise ConfigError(
                f"depths ({len(self.depths)} stages) and heads ({len(self.heads)}) must align"
            )
        if not self.depths or any(d < 0 for d in self.depths):
            raise ConfigError("depths must be a non-empty list of counts >= 0")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.sublayer_kind not in SUBLAYER_KINDS:
            raise ConfigError(f"sublayer_kind must be one of {SUBLAYER_KINDS}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError("head_dropout must lie in [0, 1)")
        if self.expansion < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("expansion must be >= 1 and kernel odd")
        for i, (grid, dim) in enumerate(zip(self.stage_grids(), self.stage_dims())):
            gh, gw = grid
            if gh % self.window or gw % self.window:
                raise ConfigError(
                    f"stage {i} grid {gh}x{gw} is not divisible by window {self.window}"
                )
            if dim % self.heads[i]:
                raise ConfigError(f"stage {i} dim {dim} not divisible by {self.heads[i]} heads")
        if self.patch.uses_cls_token:
            gh, gw = self.patch.grid
            if len(self.depths) != 1 or self.stage_merging:
                raise ConfigError("global_token mode requires a single stage without merging")
            if not (gh == gw == self.window):
                raise ConfigError("global_token mode requires the window to cover the full grid")

    def stage_grids(self) -> list[tuple[int, int]]:
        gh, gw = self.patch.grid
        grids = []
        for i in range(len(self.depths)):
            grids.append((gh, gw))
            if self.stage_merging and i + 1 < len(self.depths):
                if gh % 2 or gw % 2:
                    raise ConfigError(f"stage {i} grid {gh}x{gw} cannot be halved for merging")
                gh, gw = gh // 2, gw // 2
        return grids

    def stage_dims(self) -> list[int]:
        d = self.patch.embed_dim
        dims = []
        for i in range(len(self.depths)):
            dims.append(d)
            if self.stage_merging and i + 1 < len(self.depths):
                d *= 2
        return dims

    @property
    def final_dim(self) -> int:
        return self.stage_dims()[-1]

    @property
    def total_blocks(self) -> int:
        return sum(self.depths)


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class BlockParams:
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    sub: Union[IRBParams, FFNParams]


@dataclass
class MergeParams:
    norm: NormParams  # over the 4d concatenated features
    reduction: Tensor  # (4d, 2d), no bias


@dataclass
class ModelParams:
    embedding: EmbeddingParams
    blocks: list[BlockParams]
    merges: list[MergeParams] = field(default_factory=list)
    final_norm: NormParams = None
    head_w: Tensor = None
    head_b: Tensor = None


def block_specs(config: ModelConfig) -> list[WindowSpec]:
    """Per-block window spec, global block index running across stages."""
    specs = []
    i = 0
    for depth, grid in zip(config.depths, config.stage_grids()):
        nw = (grid[0] // config.window) * (grid[1] // config.window)
        for _ in range(depth):
            shift = config.window // 2 if (i % 2 == 1 and nw > 1) else 0
            specs.append(WindowSpec(config.window, shift, grid))
            i += 1
    return specs


def _init_norm(dim: int, dtype) -> NormParams:
    return NormParams(init.ones_param((dim,), dtype), init.zeros_param((dim,), dtype))


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    embedding = init_embedding_params(config.patch, rng, dtype)
    blocks: list[BlockParams] = []
    merges: list[MergeParams] = []
    dims = config.stage_dims()
    for stage, depth in enumerate(config.depths):
        d = dims[stage]
        for _ in range(depth):
            if config.sublayer_kind == "irb":
                sub = init_irb_params(d, config.expansion, config.kernel, rng, dtype)
            else:
                sub = init_ffn_params(d, config.expansion * d, rng, dtype)
            blocks.append(BlockParams(
                norm1=_init_norm(d, dtype),
                attn=init_attention_params(d, config.heads[stage], rng, dtype),
                norm2=_init_norm(d, dtype),
                sub=sub,
            ))
        if config.stage_merging and stage + 1 < len(config.depths):
            merges.append(MergeParams(
                norm=_init_norm(4 * d, dtype),
                reduction=init.glorot_uniform((4 * d, 2 * d), 4 * d, 2 * d, rng, dtype),
            ))
    final = _init_norm(dims[-1], dtype)
    head_w = init.glorot_uniform((dims[-1], config.num_classes), dims[-1], config.num_classes, rng, dtype)
    head_b = init.zeros_param((config.num_classes,), dtype)
    return ModelParams(embedding, blocks, merges, final, head_w, head_b)


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    """Stable (name, tensor) listing covering every learnable exactly once."""
    out: list[tuple[str, Tensor]] = [
        ("embed.projection", params.embedding.projection),
        ("embed.positional", params.embedding.positional),
    ]
    if params.embedding.cls_token is not None:
        out.append(("embed.cls", params.embedding.cls_token))
    for i, bp in enumerate(params.blocks):
        p = f"block{i}"
        out.append((f"{p}.norm1.gamma", bp.norm1.gamma))
        out.append((f"{p}.norm1.beta", bp.norm1.beta))
        out.append((f"{p}.attn.w_query", bp.attn.w_query))
        out.append((f"{p}.attn.w_key", bp.attn.w_key))
        out.append((f"{p}.attn.w_value", bp.attn.w_value))
        out.append((f"{p}.attn.w_out", bp.attn.w_out))
        out.append((f"{p}.norm2.gamma", bp.norm2.gamma))
        out.append((f"{p}.norm2.beta", bp.norm2.beta))
        if isinstance(bp.sub, IRBParams):
            out.append((f"{p}.irb.expand_w", bp.sub.expand_w))
            out.append((f"{p}.irb.expand_b", bp.sub.expand_b))
            out.append((f"{p}.irb.dw_kernel", bp.sub.dw_kernel))
            out.append((f"{p}.irb.project_w", bp.sub.project_w))
            out.append((f"{p}.irb.project_b", bp.sub.project_b))
        else:
            out.append((f"{p}.ffn.w1", bp.sub.w1))
            out.append((f"{p}.ffn.b1", bp.sub.b1))
            out.append((f"{p}.ffn.w2", bp.sub.w2))
            out.append((f"{p}.ffn.b2", bp.sub.b2))
    for j, mp in enumerate(params.merges):
        out.append((f"merge{j}.norm.gamma", mp.norm.gamma))
        out.append((f"merge{j}.norm.beta", mp.norm.beta))
        out.append((f"merge{j}.reduction", mp.reduction))
    out.append(("final_norm.gamma", params.final_norm.gamma))
    out.append(("final_norm.beta", params.final_norm.beta))
    out.append(("head.weight", params.head_w))
    out.append(("head.bias", params.head_b))
    return out


def count_parameters(params: ModelParams) -> int:
    return sum(t.data.size for _, t in named_parameters(params))


def set_requires_grad(params: ModelParams, value: bool = True) -> None:
    for _, t in named_parameters(params):
        t.requires_grad = value


def merge_patches(seq: TokenSequence, mp: MergeParams) -> TokenSequence:
    """2x2 neighborhood concat -> LN -> linear reduction to twice the width."""
    b, t, d = seq.tokens.shape
    gh, gw = seq.grid
    if gh % 2 or gw % 2:
        raise ShapeError(f"grid {gh}x{gw} cannot be merged 2x2")
    x = seq.tokens.reshape((b, gh, gw, d))
    corners = [x[:, 0::2, 0::2, :], x[:, 1::2, 0::2, :], x[:, 0::2, 1::2, :], x[:, 1::2, 1::2, :]]
    cat = concat(corners, axis=-1).reshape((b, (gh // 2) * (gw // 2), 4 * d))
    reduced = layer_norm(cat, mp.norm.gamma, mp.norm.beta) @ mp.reduction
    return TokenSequence(reduced, (gh // 2, gw // 2), has_cls=False)


def forward(
    images: Tensor,
    params: ModelParams,
    config: ModelConfig,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[Tensor, Tensor]:
    """Returns (logits (B, num_classes), penultimate pooled features (B, d)).

    The penultimate features are taken before dropout, so they are stable
    diagnostics even in train mode.
    """
    b, h, w, c = images.shape
    pc = config.patch
    if (h, w, c) != (pc.image_h, pc.image_w, pc.channels):
        raise ShapeError(
            f"images {images.shape} do not match configured {pc.image_h}x{pc.image_w}x{pc.channels}"
        )
    seq = embed(patchify(images, pc.patch_size), params.embedding, pc)

    specs = block_specs(config)
    i = 0
    for stage, depth in enumerate(config.depths):
        for _ in range(depth):
            bp = params.blocks[i]
            seq = attention_sublayer(seq, bp.attn, bp.norm1.gamma, bp.norm1.beta, specs[i])
            seq = block_output(
                seq, bp.norm2.gamma, bp.norm2.beta, bp.sub,
                kind=config.sublayer_kind, inner_skip=config.irb_inner_skip,
            )
            i += 1
        if config.stage_merging and stage + 1 < len(config.depths):
            seq = merge_patches(seq, params.merges[stage])

    normed = layer_norm(seq.tokens, params.final_norm.gamma, params.final_norm.beta)
    if pc.uses_cls_token:
        pooled = normed[:, 0, :]
    else:
        pooled = normed.mean(axis=1)

    penultimate = pooled
    if train_mode and config.head_dropout > 0.0:
        if rng is None:
            raise ConfigError("train-mode forward with dropout needs an rng")
        pooled = dropout(pooled, config.head_dropout, rng)
    logits = pooled @ params.head_w + params.head_b
    return logits, penultimate
