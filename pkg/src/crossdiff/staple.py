"""STAPLE fusion of binary rater masks by expectation-maximization.

E-step: per-pixel consensus W_i = a_i / (a_i + b_i) with
    a_i = prior * prod_j p_j^{d_ij} (1-p_j)^{1-d_ij}
    b_i = (1-prior) * prod_j (1-q_j)^{d_ij} q_j^{1-d_ij}
M-step: p_j = sum_i W_i d_ij / sum_i W_i,
        q_j = sum_i (1-W_i)(1-d_ij) / sum_i (1-W_i).
Sensitivities/specificities stay clamped to [1e-6, 1-1e-6]; the prior is
fixed across iterations (mean rater foreground fraction by default).
Iteration stops when max |delta W_i| < tol or at max_iter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

CLAMP_EPS = 1e-6


@dataclass
class StapleResult:
    consensus: np.ndarray                 # per-pixel posterior, in [0, 1]
    sensitivities: np.ndarray             # p_j per rater
    specificities: np.ndarray             # q_j per rater
    iterations: int
    prior: float
    converged: bool
    log_likelihoods: list[float] = field(default_factory=list)
    trace: list[dict] | None = None


def staple_fuse(masks, prior: float | None = None, tol: float = 1e-6,
                max_iter: int = 100, record_trace: bool = False) -> StapleResult:
    """Fuse >= 2 same-shape binary masks into a consensus probability map."""
    masks = [np.asarray(m) for m in masks]
    if len(masks) < 2:
        raise ValueError("staple_fuse needs at least 2 rater masks")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"rater mask shapes differ: {m.shape} vs {shape}")
        vals = np.unique(m)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError(f"rater masks must be binary, got values {vals[:5]}")
    d = np.stack([m.reshape(-1).astype(np.float64) for m in masks])  # (J, P)
    j = d.shape[0]

    if prior is None:
        prior = float(d.mean())
    prior = float(np.clip(prior, CLAMP_EPS, 1.0 - CLAMP_EPS))
    if not (0.0 < prior < 1.0):
        raise ValueError(f"prior must lie in (0,1), got {prior}")

    p = np.full(j, 0.99)
    q = np.full(j, 0.99)
    w_prev = None
    w = None
    lls: list[float] = []
    trace: list[dict] | None = [] if record_trace else None
    iterations = 0
    converged = False
    for it in range(max_iter):
        w, ll = kernels.staple_estep(d, p, q, prior)
        lls.append(ll)
        iterations = it + 1
        wsum = w.sum()
        cw = (1.0 - w).sum()
        p = (d * w).sum(axis=1) / wsum if wsum > 0 else np.full(j, 0.5)
        q = ((1.0 - d) * (1.0 - w)).sum(axis=1) / cw if cw > 0 else np.full(j, 0.5)
        p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
        q = np.clip(q, CLAMP_EPS, 1.0 - CLAMP_EPS)
        if trace is not None:
            trace.append({"W": w.copy(), "p": p.copy(), "q": q.copy(), "ll": ll})
        if w_prev is not None and float(np.abs(w - w_prev).max()) < tol:
            converged = True
            break
        w_prev = w

    return StapleResult(
        consensus=w.reshape(shape),
        sensitivities=p,
        specificities=q,
        iterations=iterations,
        prior=prior,
        converged=converged,
        log_likelihoods=lls,
        trace=trace,
    )
