"""Training-only mask decoder: six stride-2 transposed-conv stages, each
followed by a residual refinement block of two stride-1 transposed convs
with ReLU, then a sigmoid head at full resolution. Its MSE loss
regularizes both encoders through the fused state.

``calls`` counts forward invocations so the sampling harness can assert
the decoder never runs at inference.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import ConvTranspose2d, Module, ModuleList
from .unet import FusedState

N_UPSAMPLE_STAGES = 6


class _ResidualTransposeBlock(Module):
    """Two stride-1 transposed convs with ReLU and an identity skip."""

    def __init__(self, channels, depth_mult, rng, dtype):
        super().__init__()
        convs = []
        for _ in range(depth_mult):
            convs.append(ConvTranspose2d(channels, channels, 3, rng, stride=1,
                                         padding=1, dtype=dtype))
            convs.append(ConvTranspose2d(channels, channels, 3, rng, stride=1,
                                         padding=1, dtype=dtype, zero_init=True))
        self.convs = ModuleList(convs)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(0, len(self.convs), 2):
            h2 = self.convs[i + 1](ag.relu(self.convs[i](ag.relu(h))))
            h = h + h2
        return h

    __call__ = forward


class CrossDecoder(Module):
    def __init__(self, cond_channels: int, output_side: int, rng: np.random.Generator,
                 dtype=np.float32, channel_floor: int = 16, depth_mult: int = 1):
        super().__init__()
        if output_side % (2 ** N_UPSAMPLE_STAGES) != 0:
            raise ValueError(
                f"output side {output_side} must be divisible by 2^{N_UPSAMPLE_STAGES}"
            )
        self.output_side = output_side
        self.input_side = output_side // (2 ** N_UPSAMPLE_STAGES)
        ch = cond_channels
        ups, blocks = [], []
        for _ in range(N_UPSAMPLE_STAGES):
            nxt = max(channel_floor, ch // 2)
            ups.append(ConvTranspose2d(ch, nxt, 4, rng, stride=2, padding=1, dtype=dtype))
            blocks.append(_ResidualTransposeBlock(nxt, depth_mult, rng, dtype))
            ch = nxt
        self.ups = ModuleList(ups)
        self.blocks = ModuleList(blocks)
        self.head = ConvTranspose2d(ch, 1, 3, rng, stride=1, padding=1, dtype=dtype)
        self.calls = 0

    def decode_mask(self, fused: FusedState | Tensor) -> Tensor:
        """Fused features -> probability mask in (0, 1) at output_side."""
        self.calls += 1
        h = fused.features if isinstance(fused, FusedState) else ag.as_tensor(fused)
        s = self.input_side
        if h.shape[2] < s or h.shape[3] < s:
            raise ValueError(
                f"fused grid {h.shape[2]}x{h.shape[3]} smaller than decoder input {s}x{s}"
            )
        if h.shape[2:] != (s, s):
            h = ag.resample_area(h, (s, s))
        for up, block in zip(self.ups, self.blocks):
            h = block(up(h))
        return ag.sigmoid(self.head(h))

    __call__ = decode_mask


def decoder_loss(x_d: Tensor | np.ndarray, gt_mask: np.ndarray) -> Tensor:
    """Mean squared error between the decoded probability mask and the
    {0,1} ground truth at the same resolution."""
    x_d = ag.as_tensor(x_d)
    gt = np.asarray(gt_mask)
    if x_d.shape != gt.shape:
        raise ValueError(f"shape mismatch: decoded {x_d.shape} vs gt {gt.shape}")
    diff = x_d - ag.Tensor(gt.astype(x_d.dtype, copy=False))
    return (diff * diff).mean()
