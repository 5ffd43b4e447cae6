"""Overlap metrics (IoU, Dice), per-dataset aggregation, and the
threshold-sweep harness.

Convention: a pair of empty masks scores 1.0 on both metrics (perfect
agreement). Within a dataset, means are unweighted; the cross-dataset
average is weighted by sample count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import binarize


@dataclass
class EvalRecord:
    dataset: str
    n_samples: int
    dice: float
    iou: float


def _check_binary_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        if m.dtype != np.bool_ and not np.isin(np.unique(m), (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    return pred.astype(bool), gt.astype(bool)


def iou(pred, gt) -> float:
    """Intersection over union; both-empty pairs score 1.0."""
    p, g = _check_binary_pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def dice(pred, gt) -> float:
    """Twice the intersection over the sum of areas; both-empty -> 1.0."""
    p, g = _check_binary_pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def evaluate_dataset(pairs, name: str) -> EvalRecord:
    """Unweighted per-dataset means over (pred, gt) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot evaluate an empty pair list")
    dices = [dice(p, g) for p, g in pairs]
    ious = [iou(p, g) for p, g in pairs]
    return EvalRecord(name, len(pairs), float(np.mean(dices)), float(np.mean(ious)))


def weighted_average(records) -> EvalRecord:
    """Cross-dataset average weighted by sample counts."""
    records = list(records)
    if not records:
        raise ValueError("no records to average")
    n = sum(r.n_samples for r in records)
    d = sum(r.dice * r.n_samples for r in records) / n
    i = sum(r.iou * r.n_samples for r in records) / n
    return EvalRecord("average", n, float(d), float(i))


DEFAULT_SWEEP_THETAS = (0.1, 0.3, 0.5, 0.7, 0.9, 0.95)


def threshold_sweep(soft_preds, gts, thetas=DEFAULT_SWEEP_THETAS):
    """Binarize each soft prediction at each theta and evaluate.

    Returns one (theta, mean dice, mean iou) row per theta.
    """
    soft_preds = list(soft_preds)
    gts = list(gts)
    if len(soft_preds) != len(gts):
        raise ValueError(f"{len(soft_preds)} predictions vs {len(gts)} ground truths")
    rows = []
    for theta in thetas:
        rec = evaluate_dataset(
            [(binarize(sp, theta), gt) for sp, gt in zip(soft_preds, gts)],
            name=f"theta={theta}",
        )
        rows.append((float(theta), rec.dice, rec.iou))
    return rows


def format_sweep_table(rows) -> str:
    """Render sweep rows in the six-column threshold-table layout
    (one theta column pair per threshold, Dice and IoU sub-rows,
    percentage values)."""
    header = "Threshold (theta) | " + "  ".join(f"{t:>6g}" for t, _, _ in rows)
    dice_row = "Dice              | " + "  ".join(f"{d * 100:6.2f}" for _, d, _ in rows)
    iou_row = "IoU               | " + "  ".join(f"{i * 100:6.2f}" for _, _, i in rows)
    return "\n".join((header, dice_row, iou_row))


def format_eval_table(records, average: EvalRecord | None = None) -> str:
    """Tabulate per-dataset records plus the weighted average."""
    lines = [f"{'Dataset':<20} {'N':>5} {'Dice':>8} {'IoU':>8}"]
    for r in records:
        lines.append(f"{r.dataset:<20} {r.n_samples:>5} {r.dice * 100:8.2f} {r.iou * 100:8.2f}")
    if average is not None:
        lines.append(f"{'Average':<20} {average.n_samples:>5} "
                     f"{average.dice * 100:8.2f} {average.iou * 100:8.2f}")
    return "\n".join(lines)


def sweep_rows_json(rows) -> list[dict]:
    return [{"theta": t, "dice": d, "iou": i} for t, d, i in rows]
