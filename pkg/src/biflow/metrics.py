"""End-point-error metrics for 3D scene flow."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

REL_GUARD = 1e-12


@dataclass(frozen=True)
class MetricReport:
    epe3d_full: float
    epe3d: float | None
    acc3ds: float | None
    acc3dr: float | None
    outliers3d: float | None
    n_points: int
    n_evaluated: int

    def to_line(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


def _prepare(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"metrics: prediction {pred.shape} vs ground truth {gt.shape}")
    if mask is None:
        mask = np.ones(len(gt), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(gt),):
        raise ValueError(f"metrics: mask length {mask.shape} vs {len(gt)} points")
    return pred, gt, mask


def epe3d(pred, gt, mask=None) -> tuple[float, float | None]:
    """(mean error over all points, mean error over non-occluded points or None if none)."""
    pred, gt, mask = _prepare(pred, gt, mask)
    err = np.linalg.norm(pred - gt, axis=1)
    full = float(err.mean())
    masked = float(err[mask].mean()) if mask.any() else None
    return full, masked


def threshold_metrics(pred, gt, mask=None) -> tuple[float | None, float | None, float | None]:
    """(ACC3DS, ACC3DR, Outliers3D) over the masked points; strict inequalities."""
    pred, gt, mask = _prepare(pred, gt, mask)
    if not mask.any():
        return None, None, None
    err = np.linalg.norm(pred - gt, axis=1)[mask]
    rel = err / np.maximum(np.linalg.norm(gt, axis=1)[mask], REL_GUARD)
    acc_s = (err < 0.05) | (rel < 0.05)
    acc_r = (err < 0.1) | (rel < 0.1)
    outl = (err > 0.3) | (rel > 0.1)
    return float(acc_s.mean()), float(acc_r.mean()), float(outl.mean())


def evaluate(pred, gt, mask=None) -> MetricReport:
    full, masked = epe3d(pred, gt, mask)
    s, r, o = threshold_metrics(pred, gt, mask)
    n_eval = len(gt) if mask is None else int(np.count_nonzero(mask))
    return MetricReport(full, masked, s, r, o, len(gt), n_eval)
