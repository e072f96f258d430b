"""Evaluation metrics on binary masks: Dice, HD95 and sensitivity.

Empty-mask conventions (reported alongside every result):

* Dice: 1 when both masks are empty, 0 when exactly one is.
* Sensitivity: 1 when the target is empty.
* HD95: 0 when both are empty; undefined (``None``) when exactly one is.
  Undefined values are left out of means and counted separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import TASKS

THRESHOLD = 0.5
CONVENTIONS = {
    "threshold": THRESHOLD,
    "dice_both_empty": 1.0,
    "dice_one_empty": 0.0,
    "sensitivity_empty_target": 1.0,
    "hd95_both_empty": 0.0,
    "hd95_one_empty": "undefined (excluded from means, counted)",
    "hd95_percentile": "nearest-rank, max of directed percentiles",
}

LABELS = (0, 1, 2, 4)
# Rows: region; columns: NCR/NET (1), ED (2), ET (4)
REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}


class LabelError(ValueError):
    pass


def binarize(prob, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def labels_to_regions(labelmap) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole tumour, tumour core and enhancing tumour masks from a {0,1,2,4} label map."""
    lab = np.asarray(labelmap)
    bad = np.setdiff1d(np.unique(lab), LABELS)
    if bad.size:
        raise LabelError(f"unknown label value {bad[0]}")
    return tuple(np.isin(lab, REGION_LABELS[r]).astype(np.uint8) for r in TASKS)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def of(cls, pred, target) -> "ConfusionCounts":
        p = np.asarray(pred).astype(bool)
        t = np.asarray(target).astype(bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def dice_coef(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    denom = np.sum(t * t) + np.sum(p * p)
    if denom == 0:
        return 1.0
    return float(2.0 * np.sum(t * p) / denom)


def sensitivity(pred, target) -> float:
    c = ConfusionCounts.of(pred, target)
    if c.tp + c.fn == 0:
        return 1.0
    return c.tp / (c.tp + c.fn)


def directed_distances(src, dst) -> np.ndarray:
    """Euclidean distance from every foreground point of ``src`` to the nearest one of ``dst``."""
    src = np.asarray(src).astype(bool)
    dst = np.asarray(dst).astype(bool)
    # indices of the nearest dst point for every position
    _, nearest = ndimage.distance_transform_edt(~dst, return_indices=True)
    pts = np.nonzero(src)
    sq = np.zeros(len(pts[0]), dtype=np.int64)
    for axis, coords in enumerate(pts):
        diff = coords - nearest[axis][pts]
        sq += diff.astype(np.int64) ** 2
    return np.sqrt(sq.astype(np.float64))


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(values)
    rank = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[rank - 1])


def hd95(pred, target, pooled: bool = False) -> float | None:
    """95th-percentile Hausdorff distance in pixels (``None`` when undefined)."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if not p.any() and not t.any():
        return 0.0
    if not p.any() or not t.any():
        return None
    d_tp = directed_distances(t, p)
    d_pt = directed_distances(p, t)
    if pooled:
        return nearest_rank(np.concatenate([d_tp, d_pt]))
    return max(nearest_rank(d_tp), nearest_rank(d_pt))


def region_metrics(pred_mask, target_mask) -> dict:
    return {
        "dice": dice_coef(pred_mask, target_mask),
        "hd95": hd95(pred_mask, target_mask),
        "sensitivity": sensitivity(pred_mask, target_mask),
    }


def summarize(per_sample: list[dict]) -> dict:
    """Mean metric per region plus the "mean" column over regions.

    ``per_sample`` entries map region -> {dice, hd95, sensitivity}.
    """
    out = {"regions": {}, "hd95_undefined": {}}
    for r in TASKS:
        dice = [s[r]["dice"] for s in per_sample]
        sens = [s[r]["sensitivity"] for s in per_sample]
        hd = [s[r]["hd95"] for s in per_sample if s[r]["hd95"] is not None]
        out["regions"][r] = {
            "dice": float(np.mean(dice)) if dice else float("nan"),
            "hd95": float(np.mean(hd)) if hd else float("nan"),
            "sensitivity": float(np.mean(sens)) if sens else float("nan"),
        }
        out["hd95_undefined"][r] = len(per_sample) - len(hd)
    out["mean"] = {
        k: float(np.mean([out["regions"][r][k] for r in TASKS])) for k in ("dice", "hd95", "sensitivity")
    }
    return out
