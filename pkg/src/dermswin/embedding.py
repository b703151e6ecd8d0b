"""Patch and positional embedding: image -> token sequence.

An image is cut into non-overlapping P x P patches, each flattened row-major
and linearly projected into the embedding space. In ``pool`` mode the
sequence holds exactly the patch tokens and the classifier later averages
them; ``global_token`` mode prepends a learnable classification token, which
is only compatible with full-grid (unwindowed) attention, since a lone extra
token has no position on the window grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import init
from .errors import ConfigError
from .tensor import ShapeError, Tensor, broadcast_to, concat

CLS_MODES = ("pool", "global_token")


@dataclass(frozen=True)
class PatchConfig:
    image_h: int
    image_w: int
    patch_size: int
    embed_dim: int
    channels: int = 3
    cls_mode: str = "pool"

    def __post_init__(self):
        if self.cls_mode not in CLS_MODES:
            raise ConfigError(f"cls_mode must be one of {CLS_MODES}, got {self.cls_mode!r}")
        for field in ("image_h", "image_w", "patch_size", "embed_dim", "channels"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch size {self.patch_size}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_size, self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def uses_cls_token(self) -> bool:
        return self.cls_mode == "global_token"


@dataclass
class EmbeddingParams:
    projection: Tensor  # (patch_dim, embed_dim)
    positional: Tensor  # (N [+1 with cls token], embed_dim)
    cls_token: Optional[Tensor]  # (embed_dim,) in global_token mode


@dataclass
class TokenSequence:
    """(batch, tokens, dim) tensor plus the patch-grid geometry it came from."""

    tokens: Tensor
    grid: tuple[int, int]
    has_cls: bool = False

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def spatial_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.grid, self.has_cls)


def init_embedding_params(config: PatchConfig, rng: np.random.Generator, dtype=np.float32) -> EmbeddingParams:
    n = config.num_patches + (1 if config.uses_cls_token else 0)
    projection = init.glorot_uniform(
        (config.patch_dim, config.embed_dim), config.patch_dim, config.embed_dim, rng, dtype
    )
    positional = init.trunc_normal((n, config.embed_dim), 0.02, rng, dtype)
    cls_token = init.trunc_normal((config.embed_dim,), 0.02, rng, dtype) if config.uses_cls_token else None
    return EmbeddingParams(projection, positional, cls_token)


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """(B, H, W, C) -> (B, N, P*P*C), patches ordered row-major over the grid
    and each patch flattened row-major."""
    if images.ndim != 4:
        raise ShapeError(f"expected (B,H,W,C) images, got shape {images.shape}")
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape((b, gh, patch_size, gw, patch_size, c))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, gh * gw, patch_size * patch_size * c))


def unpatchify(patches: Tensor, image_h: int, image_w: int, patch_size: int, channels: int = 3) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    b = patches.shape[0]
    gh, gw = image_h // patch_size, image_w // patch_size
    x = patches.reshape((b, gh, gw, patch_size, patch_size, channels))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, image_h, image_w, channels))


def embed(patches: Tensor, params: EmbeddingParams, config: PatchConfig) -> TokenSequence:
    """Project patches, optionally prepend the class token, add positions."""
    b, n, d_in = patches.shape
    if n != config.num_patches or d_in != config.patch_dim:
        raise ShapeError(
            f"patches {patches.shape} do not match config (N={config.num_patches}, D={config.patch_dim})"
        )
    tokens = patches @ params.projection
    if config.uses_cls_token:
        cls = broadcast_to(params.cls_token.reshape((1, 1, config.embed_dim)), (b, 1, config.embed_dim))
        tokens = concat([cls, tokens], axis=1)
    tokens = tokens + params.positional
    return TokenSequence(tokens, config.grid, has_cls=config.uses_cls_token)
