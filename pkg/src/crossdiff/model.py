"""Model assembly: configuration presets and the combined module holding
the conditioning encoder, diffusion UNet, mask decoder and the shared
step-embedding table.

``desk`` is the small CPU-verifiable preset; ``full`` mirrors the
production geometry (448-px conditioning, 128-px diffusion). The encoder
capacity ablation is exposed as ``encoder_variant``: "base" (448-input),
"wide1024" (1024-wide backbone) or "input1024" (1024-px input).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .decoder import CrossDecoder
from .encoder import ConditioningEmbedding, CrossEncoder
from .nn import Module
from .schedule import (NoiseSchedule, SinusoidalTable, TimestepTable,
                       make_linear_schedule)
from .unet import DiffusionUNet, FusedState, UNetFeatures


@dataclass
class ModelConfig:
    preset: str = "desk"
    image_side: int = 64
    diff_side: int = 32
    patch_size: int = 8
    enc_depth: int = 2
    enc_width: int = 64
    enc_heads: int = 4
    enc_mlp_ratio: float = 4.0
    unet_widths: tuple[int, ...] = (16, 32)
    unet_attn_heads: int = 4
    d_t: int = 64
    temb_dim: int = 128
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    schedule_kind: str = "linear"
    time_embedding: str = "learned"   # or "sinusoidal"
    decoder_depth_mult: int = 1
    decoder_channel_floor: int = 16
    encoder_variant: str = "base"
    dtype: str = "float32"

    @property
    def bottleneck_side(self) -> int:
        return self.diff_side // (2 ** len(self.unet_widths))

    @property
    def cond_channels(self) -> int:
        return self.unet_widths[-1]

    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet_widths"] = list(self.unet_widths)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["unet_widths"] = tuple(d["unet_widths"])
        return ModelConfig(**d)


_DESK = ModelConfig()

_FULL = ModelConfig(
    preset="full",
    image_side=448,
    diff_side=128,
    patch_size=16,
    enc_depth=12,
    enc_width=768,
    enc_heads=12,
    unet_widths=(64, 128, 256, 512),
    unet_attn_heads=8,
    d_t=128,
    temb_dim=512,
    T=1000,
    beta_start=1e-4,
    beta_end=0.02,
)

PRESETS: dict[str, ModelConfig] = {
    "desk": _DESK,
    "full": _FULL,
}


def preset_config(name: str, encoder_variant: str = "base", **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    cfg = PRESETS[name]
    if encoder_variant == "wide1024":
        cfg = replace(cfg, enc_width=1024, enc_heads=16, encoder_variant="wide1024")
    elif encoder_variant == "input1024":
        cfg = replace(cfg, image_side=1024, encoder_variant="input1024")
    elif encoder_variant != "base":
        raise KeyError(f"unknown encoder variant {encoder_variant!r}")
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


class CrossDiffModel(Module):
    """Encoder + UNet + decoder + step table, built from one config and
    one seed. Submodule names double as checkpoint parameter groups."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.init_seed = int(seed)
        dtype = config.np_dtype()
        ss = np.random.SeedSequence([int(seed), 0x5EED])
        r_enc, r_unet, r_dec, r_time = (np.random.default_rng(s) for s in ss.spawn(4))

        hb = config.bottleneck_side
        self.cross_encoder = CrossEncoder(
            config.image_side, config.patch_size, config.enc_depth, config.enc_width,
            config.enc_heads, config.enc_mlp_ratio, config.cond_channels, (hb, hb),
            r_enc, dtype,
        )
        self.diffusion_unet = DiffusionUNet(
            config.diff_side, config.unet_widths, config.d_t, config.temb_dim,
            r_unet, dtype, attn_heads=config.unet_attn_heads,
        )
        self.cross_decoder = CrossDecoder(
            config.cond_channels, config.image_side, r_dec, dtype,
            channel_floor=config.decoder_channel_floor,
            depth_mult=config.decoder_depth_mult,
        )
        if config.time_embedding == "learned":
            self.time_table = TimestepTable(config.T, config.d_t, r_time, dtype)
        elif config.time_embedding == "sinusoidal":
            self.time_table = SinusoidalTable(config.T, config.d_t, r_time, dtype)
        else:
            raise ValueError(f"unknown time embedding {config.time_embedding!r}")
        self.schedule: NoiseSchedule = make_linear_schedule(
            config.T, config.beta_start, config.beta_end
        )

    # -- spec-level operations --------------------------------------------------

    def temb(self, t) -> ag.Tensor:
        """Expanded step embedding for scalar or per-sample ``t``."""
        return self.diffusion_unet.expand_temb(self.time_table.lookup(t))

    def encode_condition(self, image) -> ConditioningEmbedding:
        return self.cross_encoder.encode_condition(image)

    def encode_noisy(self, x_t, t) -> UNetFeatures:
        return self.diffusion_unet.encode(x_t, self.temb(t))

    def fuse(self, cond, feats: UNetFeatures, t) -> FusedState:
        return self.diffusion_unet.fuse(cond, feats, self.temb(t), t)

    def decode_eps(self, fused: FusedState, feats: UNetFeatures, t) -> ag.Tensor:
        return self.diffusion_unet.decode(fused, feats, self.temb(t))

    def decode_mask(self, fused: FusedState) -> ag.Tensor:
        return self.cross_decoder.decode_mask(fused)

    def eps_theta(self, x_t, cond: ConditioningEmbedding, t) -> ag.Tensor:
        """Full noise estimate from the noisy mask, a precomputed image
        embedding, and the step index."""
        temb = self.temb(t)
        feats = self.diffusion_unet.encode(x_t, temb)
        fused = self.diffusion_unet.fuse(cond, feats, temb, t)
        return self.diffusion_unet.decode(fused, feats, temb)


def build_model(config: ModelConfig, seed: int = 0) -> CrossDiffModel:
    return CrossDiffModel(config, seed)
