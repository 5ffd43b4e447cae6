"""Classical graph label propagation over a pixel-similarity graph.

Edge weights between neighboring pixels are exp(-(I_i - I_j)^2 / sigma^2);
each node also carries a self-loop (by default equal to its mean raw
neighbor weight) and rows are normalized to sum to 1, so one update is a
convex combination of the previous labels. Seed pixels are clamped back
to their labels after every synchronous step. The per-step sweep runs on
the numba/numpy kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .sampling import binarize

_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass
class PixelGraph:
    """Padded neighbor tables for an H x W pixel grid. Column 0 is the
    self-loop; padding entries point at the node itself with weight 0.
    ``weights_raw`` is symmetric across real edges; ``weights`` is the
    row-normalized (row-stochastic) table used for propagation."""

    shape: tuple[int, int]
    nbr_idx: np.ndarray       # (P, K) int64
    weights_raw: np.ndarray   # (P, K) float64, unnormalized
    weights: np.ndarray       # (P, K) float64, rows sum to 1
    neighborhood: int
    sigma: float

    @property
    def n_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    def to_dense(self, normalized: bool = True) -> np.ndarray:
        if self.n_pixels > 4096:
            raise ValueError("to_dense is for small graphs (<= 4096 pixels)")
        w = self.weights if normalized else self.weights_raw
        dense = np.zeros((self.n_pixels, self.n_pixels))
        for i in range(self.n_pixels):
            for k in range(self.nbr_idx.shape[1]):
                dense[i, self.nbr_idx[i, k]] += w[i, k]
        return dense


@dataclass
class LabelField:
    labels: np.ndarray    # (H, W) float64 in [0, 1]
    iteration: int = 0


def build_weights(image: np.ndarray, neighborhood: int = 8, sigma: float = 0.1,
                  self_weight: float | None = None) -> PixelGraph:
    """Similarity graph over a grayscale image. ``self_weight=None`` uses
    each node's mean raw neighbor weight as its self-loop."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if neighborhood not in (4, 8):
        raise ValueError(f"neighborhood must be 4 or 8, got {neighborhood}")
    if self_weight is not None and self_weight < 0:
        raise ValueError("self_weight must be >= 0")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-D grayscale")
    h, w = img.shape
    p = h * w
    offsets = _OFFSETS_4 if neighborhood == 4 else _OFFSETS_8
    k = len(offsets) + 1

    idx = np.tile(np.arange(p, dtype=np.int64)[:, None], (1, k))
    raw = np.zeros((p, k), dtype=np.float64)
    ys, xs = np.divmod(np.arange(p), w)
    flat = img.reshape(-1)
    inv_s2 = 1.0 / (sigma * sigma)
    for col, (dy, dx) in enumerate(offsets, start=1):
        ny = ys + dy
        nx = xs + dx
        valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        nidx = np.where(valid, ny * w + nx, np.arange(p))
        diff = flat - flat[nidx]
        raw[:, col] = np.where(valid, np.exp(-(diff * diff) * inv_s2), 0.0)
        idx[:, col] = nidx

    counts = (raw[:, 1:] > 0).sum(axis=1)
    if self_weight is None:
        raw[:, 0] = raw[:, 1:].sum(axis=1) / np.maximum(counts, 1)
    else:
        raw[:, 0] = self_weight
    rowsum = raw.sum(axis=1)
    if np.any(rowsum <= 0):
        raise ValueError("graph has an isolated node with zero total weight")
    norm = raw / rowsum[:, None]
    return PixelGraph((h, w), idx, raw, norm, neighborhood, float(sigma))


def graph_from_dense(dense: np.ndarray) -> PixelGraph:
    """Wrap an explicit row-stochastic matrix as a 1 x P pixel graph
    (testing/demo hook for hand-built propagation examples)."""
    dense = np.asarray(dense, dtype=np.float64)
    p = dense.shape[0]
    if dense.shape != (p, p):
        raise ValueError("dense weight matrix must be square")
    idx = np.tile(np.arange(p, dtype=np.int64)[None, :], (p, 1))
    return PixelGraph((1, p), idx, dense.copy(), dense.copy(), 8, 1.0)


def propagate(field: LabelField, graph: PixelGraph, steps: int,
              clamp_mask: np.ndarray | None = None,
              clamp_values: np.ndarray | None = None) -> LabelField:
    """Apply ``steps`` synchronous updates L <- W L, re-clamping seed
    pixels after each step when a clamp mask is given."""
    if field.labels.shape != graph.shape:
        raise ValueError(f"label field {field.labels.shape} does not match graph {graph.shape}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    labels = field.labels.reshape(-1).astype(np.float64)
    cm = cv = None
    if clamp_mask is not None:
        cm = np.asarray(clamp_mask, dtype=np.bool_).reshape(-1)
        if clamp_values is None:
            raise ValueError("clamp_values required with clamp_mask")
        cv = np.asarray(clamp_values, dtype=np.float64).reshape(-1)
    out = kernels.propagate_steps(labels, graph.nbr_idx, graph.weights, int(steps), cm, cv)
    return LabelField(out.reshape(graph.shape), field.iteration + int(steps))


def seeds_to_arrays(seeds: np.ndarray, shape: tuple[int, int]):
    """(M, 3) rows of (x, y, label) -> boolean seed mask + label image."""
    seeds = np.asarray(seeds)
    if seeds.ndim != 2 or seeds.shape[1] != 3:
        raise ValueError("seeds must be an (M, 3) array of (x, y, label)")
    h, w = shape
    mask = np.zeros(shape, dtype=np.bool_)
    values = np.zeros(shape, dtype=np.float64)
    for x, y, lab in seeds:
        xi, yi, li = int(x), int(y), float(lab)
        if not (0 <= xi < w and 0 <= yi < h):
            raise ValueError(f"seed ({xi},{yi}) outside {w}x{h} image")
        if li not in (0.0, 1.0):
            raise ValueError(f"seed labels must be 0 or 1, got {li}")
        mask[yi, xi] = True
        values[yi, xi] = li
    return mask, values


def segment_by_propagation(image: np.ndarray, seeds: np.ndarray, steps: int = 200,
                           theta: float = 0.5, neighborhood: int = 8,
                           sigma: float = 0.1,
                           self_weight: float | None = None) -> np.ndarray:
    """Propagate sparse {0,1} seeds over the similarity graph, then
    binarize at theta. Unseeded pixels start at 0 (background prior), so
    regions the foreground seed cannot reach stay background."""
    image = np.asarray(image, dtype=np.float64)
    seed_mask, seed_values = seeds_to_arrays(seeds, image.shape)
    have_fg = bool((seed_values[seed_mask] == 1.0).any())
    have_bg = bool((seed_values[seed_mask] == 0.0).any())
    if not (have_fg and have_bg):
        raise ValueError("seeds must include at least one foreground and one background pixel")
    graph = build_weights(image, neighborhood, sigma, self_weight)
    labels = np.zeros(image.shape)
    labels[seed_mask] = seed_values[seed_mask]
    field = propagate(LabelField(labels), graph, steps, seed_mask, seed_values)
    return binarize(field.labels, theta)


def make_bright_line_demo(side: int = 8, row: int | None = None):
    """Constructed slender-object instance: one bright 1-px line on a dark
    constant background, one seed per class, ground-truth line mask."""
    if row is None:
        row = side // 2
    image = np.full((side, side), 0.1)
    image[row, :] = 0.9
    gt = np.zeros((side, side), dtype=np.uint8)
    gt[row, :] = 1
    seeds = np.array([
        [0, row, 1],   # (x, y, label) on the line
        [0, 0, 0],     # background corner
    ])
    return image, seeds, gt
