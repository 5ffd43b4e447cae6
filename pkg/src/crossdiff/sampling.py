"""Reverse-chain sampling, n-sample ensembling, and STAPLE-fused
prediction.

The image embedding is computed once per image and reused by every step
of every chain. Noise draws per chain come from that chain's own
generator in a fixed order (initial state, then one z per step down to
t = 1; the terminal step is deterministic), so a seed fully determines a
mask. The mask decoder is never invoked here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .model import CrossDiffModel
from .schedule import predict_x0, reverse_step, soft_from_signal
from .staple import StapleResult, staple_fuse


def _as_batched_image(model: CrossDiffModel, image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=model.config.np_dtype())
    if img.ndim == 3:
        img = img[None]
    s = model.config.image_side
    if img.shape[1:] != (3, s, s):
        raise ValueError(
            f"checkpoint/preset mismatch: expected image (3,{s},{s}), got {img.shape[1:]}"
        )
    return img


def sample_mask(model: CrossDiffModel, image: np.ndarray,
                rng: np.random.Generator, cond=None) -> np.ndarray:
    """Run one full reverse chain; returns a soft mask (s, s) in [0, 1].

    Between the noise estimate and the posterior step, the implied clean
    signal is clamped to the mask range [-1, 1] and the estimate
    re-derived (the clip-denoised guard of the reference DDPM sampler).
    While the chain stays in distribution this is an exact no-op; it
    prevents the multiplicative 1/sqrt(alpha) blow-up otherwise.
    """
    dtype = model.config.np_dtype()
    s = model.config.diff_side
    sched = model.schedule
    with ag.no_grad():
        if cond is None:
            cond = model.encode_condition(_as_batched_image(model, image))
        x = rng.standard_normal((1, 1, s, s)).astype(dtype, copy=False)
        for t in reversed(range(sched.T)):
            eps_hat = model.eps_theta(ag.Tensor(x), cond, t).data
            if not np.all(np.isfinite(eps_hat)):
                from .errors import NumericError

                raise NumericError(f"non-finite noise estimate at step {t}")
            x0_hat = np.clip(predict_x0(x, eps_hat, t, sched), -1.0, 1.0)
            eps_hat = ((x - sched.sqrt_alpha_bars[t] * x0_hat)
                       / sched.sqrt_one_minus_alpha_bars[t]).astype(dtype, copy=False)
            z = (rng.standard_normal(x.shape).astype(dtype, copy=False)
                 if t > 0 else np.zeros_like(x))
            x = reverse_step(x, eps_hat, t, sched, z)
    return soft_from_signal(x[0, 0])


def ensemble_sample(model: CrossDiffModel, image: np.ndarray, n: int = 5,
                    seeds=None) -> list[np.ndarray]:
    """n independent reverse chains over one shared image embedding."""
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    if seeds is None:
        raise ValueError("seeds are required (one per chain)")
    seeds = list(seeds)
    if len(seeds) != n:
        raise ValueError(f"expected {n} seeds, got {len(seeds)}")
    if len(set(int(s) for s in seeds)) != n:
        raise ValueError("ensemble seeds must be distinct")
    with ag.no_grad():
        cond = model.encode_condition(_as_batched_image(model, image))
    return [sample_mask(model, image, np.random.default_rng(int(s)), cond=cond)
            for s in seeds]


def binarize(mask: np.ndarray, theta: float) -> np.ndarray:
    """Pixel = 1 iff value >= theta; theta must lie strictly inside (0, 1)."""
    if not (0.0 < theta < 1.0):
        raise ValueError(f"threshold must lie in (0,1), got {theta}")
    return (np.asarray(mask) >= theta).astype(np.uint8)


@dataclass
class FusedPrediction:
    mask: np.ndarray                  # binary {0,1} uint8
    consensus: np.ndarray             # soft consensus in [0,1]
    samples: list[np.ndarray]
    staple: StapleResult | None


def fused_prediction(model: CrossDiffModel, image: np.ndarray, theta: float = 0.5,
                     n: int = 5, seeds=None, staple_tol: float = 1e-6,
                     staple_max_iter: int = 100) -> FusedPrediction:
    """Ensemble -> per-sample binarize at 0.5 -> STAPLE -> binarize the
    consensus at theta. A single-sample ensemble bypasses STAPLE."""
    if seeds is None:
        raise ValueError("seeds are required (one per chain)")
    soft = ensemble_sample(model, image, n=n, seeds=seeds)
    if n == 1:
        return FusedPrediction(binarize(soft[0], theta), soft[0], soft, None)
    raters = [binarize(m, 0.5) for m in soft]
    res = staple_fuse(raters, tol=staple_tol, max_iter=staple_max_iter)
    return FusedPrediction(binarize(res.consensus, theta), res.consensus, soft, res)
