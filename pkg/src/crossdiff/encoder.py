"""ViT-style image encoder producing the conditioning embedding from the
raw image: patch projection, learned absolute positions, pre-norm
transformer blocks, and a neck that projects + area-resamples tokens onto
the diffusion bottleneck grid.

The embedding depends only on the image, never on the step index, so one
forward pass conditions an entire reverse chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Conv2d, Linear, Module, ModuleList, Parameter, TransformerBlock


@dataclass
class PatchGrid:
    """Token grid (N, H_p, W_p, d) plus the patch size that produced it."""

    tokens: Tensor
    patch_size: int

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.tokens.shape[1], self.tokens.shape[2]


@dataclass
class ConditioningEmbedding:
    """Image embedding aligned to the diffusion bottleneck grid:
    features (N, c_b, h_b, w_b)."""

    features: Tensor
    source_resolution: int


class CrossEncoder(Module):
    def __init__(self, image_side: int, patch_size: int, depth: int, width: int,
                 heads: int, mlp_ratio: float, cond_channels: int,
                 bottleneck_hw: tuple[int, int], rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if image_side % patch_size != 0:
            raise ValueError(f"image side {image_side} not divisible by patch {patch_size}")
        self.image_side = image_side
        self.patch_size = patch_size
        self.width = width
        self.cond_channels = cond_channels
        self.bottleneck_hw = tuple(bottleneck_hw)
        self.grid_side = image_side // patch_size
        self.proj = Conv2d(3, width, patch_size, rng, stride=patch_size, dtype=dtype)
        self.pos = Parameter(
            (rng.standard_normal((1, self.grid_side, self.grid_side, width)) * 0.02).astype(dtype),
            decay=False,
        )
        self.blocks = ModuleList(
            TransformerBlock(width, heads, mlp_ratio, rng, dtype) for _ in range(depth)
        )
        self.neck_proj = Linear(width, cond_channels, rng, dtype)

    # -- stages ---------------------------------------------------------------

    def patch_embed(self, image: Tensor | np.ndarray) -> PatchGrid:
        """Linear projection of non-overlapping patches -> token grid."""
        image = ag.as_tensor(image)
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        h, w = image.shape[2], image.shape[3]
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image dims {h}x{w} not divisible by patch {self.patch_size}")
        t = self.proj(image)  # (N, d, Hp, Wp)
        return PatchGrid(t.transpose((0, 2, 3, 1)), self.patch_size)

    def add_positional(self, grid: PatchGrid, pos: Tensor | None = None) -> PatchGrid:
        pos = self.pos if pos is None else ag.as_tensor(pos)
        if pos.shape[-3:] != grid.tokens.shape[-3:]:
            raise ValueError(
                f"positional shape {pos.shape} does not match tokens {grid.tokens.shape}"
            )
        return PatchGrid(grid.tokens + pos, grid.patch_size)

    def transformer_block(self, index: int, grid: PatchGrid) -> PatchGrid:
        n, hp, wp, d = grid.tokens.shape
        seq = grid.tokens.reshape((n, hp * wp, d))
        seq = self.blocks[index](seq)
        out = seq.reshape((n, hp, wp, d))
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError(f"non-finite activations in encoder block {index}")
        return PatchGrid(out, grid.patch_size)

    def neck(self, grid: PatchGrid, target_hw: tuple[int, int] | None = None) -> ConditioningEmbedding:
        """1x1 projection to the conditioning width, then area resampling
        of the token grid down to the bottleneck grid."""
        th, tw = target_hw if target_hw is not None else self.bottleneck_hw
        hp, wp = grid.grid_hw
        if th > hp or tw > wp:
            raise ValueError(f"neck target {th}x{tw} exceeds source grid {hp}x{wp}")
        feats = self.neck_proj(grid.tokens)            # (N, Hp, Wp, c_b)
        feats = feats.transpose((0, 3, 1, 2))          # (N, c_b, Hp, Wp)
        feats = ag.resample_area(feats, (th, tw))
        return ConditioningEmbedding(feats, self.image_side)

    def encode_condition(self, image: Tensor | np.ndarray) -> ConditioningEmbedding:
        image = ag.as_tensor(image)
        if image.ndim == 3:
            image = image.reshape((1,) + image.shape)
        if image.shape[2] != self.image_side or image.shape[3] != self.image_side:
            raise ValueError(
                f"expected {self.image_side}x{self.image_side} input, got "
                f"{image.shape[2]}x{image.shape[3]}"
            )
        grid = self.add_positional(self.patch_embed(image))
        for i in range(len(self.blocks)):
            grid = self.transformer_block(i, grid)
        return self.neck(grid)

    __call__ = encode_condition
