"""Closed-form diffusion math: noise schedules, forward noising, the
reverse posterior step, and step-index embeddings.

Masks are encoded as x0 in {-1, +1} so the clean signal has the same
scale as standard-normal noise; ``soft_from_signal`` maps back to [0, 1].
All schedule arrays are float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .nn import Module, Parameter


@dataclass
class NoiseSchedule:
    """Precomputed variance schedule over T steps (zero-based indexing,
    cumulative products starting at alpha_bars[0] == alphas[0])."""

    T: int
    beta_start: float
    beta_end: float
    kind: str
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sqrt_alpha_bars: np.ndarray = field(init=False)
    sqrt_one_minus_alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sqrt_alpha_bars = np.sqrt(self.alpha_bars)
        self.sqrt_one_minus_alpha_bars = np.sqrt(1.0 - self.alpha_bars)

    def meta(self) -> dict:
        return {
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "schedule_kind": self.kind,
        }


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated betas from beta_start to beta_end inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"step count must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), "linear",
                         betas, alphas, alpha_bars)


def schedule_from_meta(meta: dict) -> NoiseSchedule:
    if meta.get("schedule_kind", "linear") != "linear":
        raise ValueError(f"unsupported schedule kind {meta.get('schedule_kind')!r}")
    return make_linear_schedule(int(meta["T"]), float(meta["beta_start"]),
                                float(meta["beta_end"]))


def _check_t(t, T: int):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= T):
        raise ValueError(f"step index {t} out of range [0, {T})")
    return t


def _per_sample(coef: np.ndarray, t, x: np.ndarray) -> np.ndarray:
    """Gather coef[t] and shape it to broadcast over x. Scalar t broadcasts
    directly; an array t must match the batch axis."""
    c = coef[t]
    if np.ndim(t) == 0:
        return np.asarray(c, dtype=x.dtype)
    return c.astype(x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))


def forward_noise(x0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """q(x_t | x_0) sample: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.

    ``t`` is a scalar step index or a per-sample index array matching the
    leading batch axis.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = _check_t(t, sched.T)
    a = _per_sample(sched.sqrt_alpha_bars, t, x0)
    b = _per_sample(sched.sqrt_one_minus_alpha_bars, t, x0)
    return a * x0 + b * eps


def predict_x0(x_t: np.ndarray, eps_hat: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """Algebraic inverse of forward_noise: (x_t - sqrt(1-abar_t)*eps)/sqrt(abar_t)."""
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps_hat {eps_hat.shape}")
    t = _check_t(t, sched.T)
    a = _per_sample(sched.sqrt_alpha_bars, t, x_t)
    b = _per_sample(sched.sqrt_one_minus_alpha_bars, t, x_t)
    return (x_t - b * eps_hat) / a


def reverse_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                 z: np.ndarray) -> np.ndarray:
    """One DDPM posterior sample:
    (1/sqrt(alpha_t)) * (x_t - beta_t/sqrt(1-abar_t) * eps_hat) + sqrt(beta_t)*z,
    with the fixed variance choice sigma_t^2 = beta_t. ``z`` must be all
    zeros at t = 0 (the terminal denoise is deterministic).
    """
    if x_t.shape != eps_hat.shape or x_t.shape != z.shape:
        raise ValueError("x_t, eps_hat and z must share one shape")
    t = int(_check_t(t, sched.T))
    if t == 0 and np.any(z != 0):
        raise ValueError("z must be zero at t = 0")
    beta = sched.betas[t]
    coef = beta / sched.sqrt_one_minus_alpha_bars[t]
    mean = (x_t - coef * eps_hat) / np.sqrt(sched.alphas[t])
    return (mean + np.sqrt(beta) * z).astype(x_t.dtype, copy=False)


def encode_mask(mask01: np.ndarray, dtype=np.float32) -> np.ndarray:
    """{0,1} mask -> {-1,+1} signal."""
    return (mask01.astype(dtype) * 2.0 - 1.0).astype(dtype)


def soft_from_signal(x: np.ndarray) -> np.ndarray:
    """[-1,1] signal -> clamped [0,1] probability map."""
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


class TimestepTable(Module):
    """Learned per-step embedding table (T, d_t), shared by every block
    that consumes the step index within one pass."""

    kind = "learned"

    def __init__(self, T: int, d_t: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.T, self.d_t = T, d_t
        self.table = Parameter(rng.standard_normal((T, d_t)).astype(dtype), decay=False)

    def lookup(self, t) -> ag.Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        _check_t(t, self.T)
        return ag.embedding(self.table, t)

    __call__ = lookup


class SinusoidalTable(Module):
    """Fixed sinusoidal step embedding, selectable via config flag."""

    kind = "sinusoidal"

    def __init__(self, T: int, d_t: int, rng=None, dtype=np.float32):
        super().__init__()
        if d_t % 2 != 0:
            raise ValueError("sinusoidal embedding width must be even")
        self.T, self.d_t = T, d_t
        pos = np.arange(T, dtype=np.float64)[:, None]
        freq = np.exp(-np.log(10000.0) * np.arange(d_t // 2, dtype=np.float64) / (d_t // 2))
        ang = pos * freq[None, :]
        self._table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)

    def lookup(self, t) -> ag.Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        _check_t(t, self.T)
        return ag.Tensor(self._table[t])

    __call__ = lookup


def embed_timestep(t: int, emb) -> np.ndarray:
    """Row ``t`` of a step-embedding table (ndarray view of the shared row)."""
    if isinstance(emb, TimestepTable):
        table = emb.table.data
    elif isinstance(emb, SinusoidalTable):
        table = emb._table
    else:
        table = np.asarray(emb)
    _check_t(t, table.shape[0])
    return table[int(t)]
