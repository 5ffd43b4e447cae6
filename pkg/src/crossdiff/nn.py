"""Layers and parameter containers built on the autodiff core.

All parameter initialization draws from an explicit ``numpy.random.Generator``
so model construction is fully reproducible from a seed.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    """Trainable tensor. ``decay=False`` marks parameters exempt from
    weight decay (embedding tables, norm gains/offsets, biases)."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = True):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.decay = decay


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for k, v in state.items():
            if k in own:
                p = own[k]
                if p.data.shape != v.shape:
                    raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {v.shape}")
                p.data = np.ascontiguousarray(v, dtype=p.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# -- initializers --------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape, dtype, gain: float = 1.0):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_normal(rng: np.random.Generator, shape, dtype, fan_in=None):
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal(size=shape) * std).astype(dtype)


# -- basic layers --------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=dtype)
        else:
            w = xavier_uniform(rng, (in_features, out_features), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_features)) if len(lead) != 1 else x
        y = flat @ self.weight
        if self.bias is not None:
            y = y + self.bias
        if len(lead) != 1:
            y = y.reshape(lead + (self.out_features,))
        return y

    __call__ = forward


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 dtype=np.float32, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = kaiming_normal(rng, shape, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    __call__ = forward


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0,
                 dtype=np.float32, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        shape = (in_ch, out_ch, kernel, kernel)
        if zero_init:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = kaiming_normal(rng, shape, dtype, fan_in=in_ch * kernel * kernel)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ag.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype), decay=False)
        self.beta = Parameter(np.zeros(dim, dtype=dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = xc * (var + self.eps) ** -0.5
        return xn * self.gamma + self.beta

    __call__ = forward


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        if channels % groups != 0:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        g = self.groups
        xg = x.reshape((n, g, (c // g) * h * w))
        mu = xg.mean(axis=-1, keepdims=True)
        xc = xg - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        xn = (xc * (var + self.eps) ** -0.5).reshape((n, c, h, w))
        gamma = self.gamma.reshape((1, c, 1, 1))
        beta = self.beta.reshape((1, c, 1, 1))
        return xn * gamma + beta

    __call__ = forward


class MultiheadSelfAttention(Module):
    """Softmax self-attention over token sequences (N, L, D).

    ``keep_attn=True`` stashes the last softmax probabilities in
    ``last_attn`` (detached ndarray, shape (N, heads, L, L)) for
    row-sum checks.
    """

    def __init__(self, dim, heads, rng, dtype=np.float32, zero_init_out: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype, zero_init=zero_init_out)
        self.keep_attn = False
        self.last_attn = None

    def forward(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return t.reshape((n, l, h, hd)).transpose((0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        attn = ag.softmax(scores)
        if self.keep_attn:
            self.last_attn = attn.data.copy()
        y = (attn @ v).transpose((0, 2, 1, 3)).reshape((n, l, d))
        return self.out(y)

    __call__ = forward


class TransformerBlock(Module):
    """Pre-norm block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim, heads, mlp_ratio, rng, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = MultiheadSelfAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        hidden = int(dim * mlp_ratio)
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(ag.silu(self.fc1(self.ln2(x))))

    __call__ = forward


class ResidualBlock(Module):
    """UNet-style residual conv block with additive time conditioning.

    GroupNorm -> SiLU -> conv, then GroupNorm, inject the time embedding
    as a per-channel shift AFTER the second norm (so normalization cannot
    cancel it, regardless of group size), SiLU, zero-init conv, plus an
    identity (or 1x1-projected) skip.
    """

    def __init__(self, in_ch, out_ch, temb_dim, rng, dtype=np.float32, groups=8):
        super().__init__()
        g1 = min(groups, in_ch)
        g2 = min(groups, out_ch)
        self.norm1 = GroupNorm(g1, in_ch, dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.temb_proj = Linear(temb_dim, out_ch, rng, dtype)
        self.norm2 = GroupNorm(g2, out_ch, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, dtype=dtype, zero_init=True)
        self.skip = None if in_ch == out_ch else Conv2d(in_ch, out_ch, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ag.silu(self.norm1(x)))
        tadd = self.temb_proj(ag.silu(temb))
        h = self.norm2(h) + tadd.reshape((tadd.shape[0], tadd.shape[1], 1, 1))
        h = self.conv2(ag.silu(h))
        s = x if self.skip is None else self.skip(x)
        return s + h

    __call__ = forward


class AttentionBlock2d(Module):
    """Residual spatial self-attention over an (N, C, H, W) grid."""

    def __init__(self, channels, heads, rng, dtype=np.float32, groups=8):
        super().__init__()
        self.norm = GroupNorm(min(groups, channels), channels, dtype)
        self.attn = MultiheadSelfAttention(channels, heads, rng, dtype, zero_init_out=True)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        t = self.norm(x).reshape((n, c, h * w)).transpose((0, 2, 1))
        t = self.attn(t)
        return x + t.transpose((0, 2, 1)).reshape((n, c, h, w))

    __call__ = forward
