"""Diffusion encoder/decoder (UNet) predicting the noise component from
the noisy mask, with the conditioning embedding added at the bottleneck
and refined by the fusion nexus (residual block + spatial attention +
residual block, all time-aware).

Condition injection is bottleneck-additive only; skip connections carry
no conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import ConditioningEmbedding
from .nn import (AttentionBlock2d, Conv2d, ConvTranspose2d, Linear, Module,
                 ModuleList, ResidualBlock)


@dataclass
class UNetFeatures:
    """Per-scale skip features plus the bottleneck grid (N, c_b, h_b, w_b)."""

    skips: list[Tensor]
    bottleneck: Tensor


@dataclass
class FusedState:
    """Nexus output consumed by both the eps decoder and the mask decoder."""

    features: Tensor
    step: np.ndarray


class FusionNexus(Module):
    def __init__(self, channels, temb_dim, heads, rng, dtype=np.float32):
        super().__init__()
        self.res_in = ResidualBlock(channels, channels, temb_dim, rng, dtype)
        self.attn = AttentionBlock2d(channels, heads, rng, dtype)
        self.res_out = ResidualBlock(channels, channels, temb_dim, rng, dtype)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        return self.res_out(self.attn(self.res_in(x, temb)), temb)

    __call__ = forward


class DiffusionUNet(Module):
    def __init__(self, input_side: int, widths: tuple[int, ...], d_t: int,
                 temb_dim: int, rng: np.random.Generator, dtype=np.float32,
                 attn_heads: int = 4, in_channels: int = 1):
        super().__init__()
        if input_side % (2 ** len(widths)) != 0:
            raise ValueError(f"input side {input_side} not divisible by 2^{len(widths)}")
        self.input_side = input_side
        self.widths = tuple(widths)
        self.bottleneck_side = input_side // (2 ** len(widths))
        self.bottleneck_channels = widths[-1]
        self.temb_dim = temb_dim
        self.in_channels = in_channels

        self.time_fc1 = Linear(d_t, temb_dim, rng, dtype)
        self.time_fc2 = Linear(temb_dim, temb_dim, rng, dtype)

        self.conv_in = Conv2d(in_channels, widths[0], 3, rng, padding=1, dtype=dtype)
        down_res, downs = [], []
        ch = widths[0]
        for w in widths:
            down_res.append(ResidualBlock(ch, w, temb_dim, rng, dtype))
            downs.append(Conv2d(w, w, 3, rng, stride=2, padding=1, dtype=dtype))
            ch = w
        self.down_res = ModuleList(down_res)
        self.downs = ModuleList(downs)

        self.nexus = FusionNexus(widths[-1], temb_dim, attn_heads, rng, dtype)

        ups, up_res = [], []
        for w in reversed(widths):
            ups.append(ConvTranspose2d(ch, w, 4, rng, stride=2, padding=1, dtype=dtype))
            up_res.append(ResidualBlock(w + w, w, temb_dim, rng, dtype))
            ch = w
        self.ups = ModuleList(ups)
        self.up_res = ModuleList(up_res)

        from .nn import GroupNorm  # local import to keep module list tidy

        self.norm_out = GroupNorm(min(8, widths[0]), widths[0], dtype)
        self.conv_out = Conv2d(widths[0], in_channels, 3, rng, padding=1,
                               dtype=dtype, zero_init=True)

    # -- time conditioning ------------------------------------------------------

    def expand_temb(self, raw: Tensor) -> Tensor:
        """Two-layer SiLU perceptron expanding the shared table row(s)."""
        return self.time_fc2(ag.silu(self.time_fc1(raw)))

    # -- stages ------------------------------------------------------------------

    def encode(self, x_t: Tensor | np.ndarray, temb: Tensor) -> UNetFeatures:
        x_t = ag.as_tensor(x_t)
        if x_t.ndim == 3:
            x_t = x_t.reshape((1,) + x_t.shape)
        if x_t.shape[2] != self.input_side or x_t.shape[3] != self.input_side:
            raise ValueError(
                f"expected {self.input_side}x{self.input_side} noisy mask, got "
                f"{x_t.shape[2]}x{x_t.shape[3]}"
            )
        h = self.conv_in(x_t)
        skips = []
        for res, down in zip(self.down_res, self.downs):
            h = res(h, temb)
            skips.append(h)
            h = down(h)
        return UNetFeatures(skips=skips, bottleneck=h)

    def fuse(self, cond: ConditioningEmbedding | Tensor, feats: UNetFeatures,
             temb: Tensor, step) -> FusedState:
        e_i = cond.features if isinstance(cond, ConditioningEmbedding) else ag.as_tensor(cond)
        if e_i.shape != feats.bottleneck.shape:
            raise ValueError(
                f"conditioning {e_i.shape} does not match bottleneck {feats.bottleneck.shape}"
            )
        fused = self.nexus(e_i + feats.bottleneck, temb)
        return FusedState(features=fused, step=np.atleast_1d(np.asarray(step)))

    def decode(self, fused: FusedState, feats: UNetFeatures, temb: Tensor) -> Tensor:
        if fused.features.shape != feats.bottleneck.shape:
            raise ValueError("fused state does not match the encoder bottleneck shape")
        if len(feats.skips) != len(self.ups):
            raise ValueError(
                f"expected {len(self.ups)} skip tensors, got {len(feats.skips)}"
            )
        h = fused.features
        for i, (up, res) in enumerate(zip(self.ups, self.up_res)):
            h = up(h)
            skip = feats.skips[len(feats.skips) - 1 - i]
            if skip.shape[2:] != h.shape[2:]:
                raise ValueError("skip/fused provenance mismatch (spatial dims differ)")
            h = res(ag.concat([h, skip], axis=1), temb)
        return self.conv_out(ag.silu(self.norm_out(h)))

    def forward(self, x_t, cond: ConditioningEmbedding, temb: Tensor, step) -> Tensor:
        feats = self.encode(x_t, temb)
        fused = self.fuse(cond, feats, temb, step)
        return self.decode(fused, feats, temb)

    __call__ = forward
