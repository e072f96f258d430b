"""Training objective: clipped BCE plus Dice, summed over the three regions.

Predictions are ``[B, H, W]`` probability tensors; targets are binary arrays
of the same shape. Per-sample losses are summed over pixels and averaged
over the batch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import TASKS
from .tensor import DimensionError, Tensor

DICE_EPS = 1e-6


def _pixel_axes(pred: Tensor) -> tuple[int, ...]:
    return tuple(range(1, pred.ndim)) if pred.ndim > 2 else tuple(range(pred.ndim))


def _target(pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    if target.shape != pred.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return Tensor(target, dtype=pred.dtype)


def _batch_mean(per_sample: Tensor) -> Tensor:
    return T.mean(per_sample) if per_sample.ndim else per_sample


def bce_clipped(pred: Tensor, target) -> Tensor:
    """Sum over pixels of -[y log p + (1 - y) log(1 - p)], each log floored at -100."""
    y = _target(pred, target)
    terms = y * T.log_clipped(pred) + (1.0 - y) * T.log_clipped(1.0 - pred)
    return _batch_mean(-T.sum(terms, axis=_pixel_axes(pred)))


def dice_loss(pred: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(y p) + eps) / (sum(y^2) + sum(p^2) + eps)."""
    y = _target(pred, target)
    axes = _pixel_axes(pred)
    inter = T.sum(y * pred, axis=axes)
    denom = T.sum(y * y, axis=axes) + T.sum(pred * pred, axis=axes)
    return _batch_mean(1.0 - (inter * 2.0 + eps) / (denom + eps))


def loss_terms(preds: dict[str, Tensor], targets: dict[str, np.ndarray]) -> dict[str, Tensor]:
    out = {}
    for t in TASKS:
        out[f"bce_{t}"] = bce_clipped(preds[t], targets[t])
        out[f"dice_{t}"] = dice_loss(preds[t], targets[t])
    return out


def total_loss(preds: dict[str, Tensor], targets: dict[str, np.ndarray]) -> Tensor:
    """(BCE_WT + Dice_WT) + (BCE_TC + Dice_TC) + (BCE_ET + Dice_ET)."""
    terms = loss_terms(preds, targets)
    pairs = [terms[f"bce_{t}"] + terms[f"dice_{t}"] for t in TASKS]
    return (pairs[0] + pairs[1]) + pairs[2]


def loss_components(preds: dict[str, Tensor], targets: dict[str, np.ndarray], kinds=("bce", "dice")) -> np.ndarray:
    """The additive pieces of ``total_loss`` as a flat float64 array.

    Per-pixel BCE terms and per-sample Dice terms, each already divided by
    the batch size, so ``math.fsum`` of the array equals the total loss.
    Differencing these before summing keeps finite differences accurate.
    """
    parts = []
    for t in TASKS:
        p = preds[t].data.astype(np.float64)
        y = np.asarray(targets[t], dtype=np.float64)
        b = p.shape[0] if p.ndim > 2 else 1
        with T.no_grad():
            logs = y * T.log_clipped(Tensor(p)).data + (1 - y) * T.log_clipped(Tensor(1 - p)).data
        if "bce" in kinds:
            parts.append((-logs / b).ravel())
        if "dice" not in kinds:
            continue
        if p.ndim > 2:
            dice = [dice_loss(Tensor(p[i : i + 1]), y[i : i + 1]).item() / b for i in range(b)]
        else:
            dice = [dice_loss(Tensor(p), y).item()]
        parts.append(np.array(dice))
    return np.concatenate(parts)
