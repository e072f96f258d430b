"""Training loop, checkpoints and evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TASKS, RunConfig
from .data.slices import SliceSample, batch_arrays
from .losses import total_loss
from .metrics import CONVENTIONS, binarize, dice_coef, region_metrics, summarize
from .model import Model
from .params import CheckpointError, read_checkpoint
from .tensor import ConfigurationError, Rng

log = logging.getLogger(__name__)

CSV_HEADER = ["epoch", "loss", "dice_wt", "dice_tc", "dice_et"]
METRIC_KEYS = ("dice", "hd95", "sensitivity")
REPORT_COLUMNS = ["model"] + [f"{k}_{r}" for k in METRIC_KEYS for r in ("wt", "tc", "et", "mean")] + ["fingerprint"]
EVAL_BATCH = 16


class EmptySplitError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    dice: dict[str, float]
    steps: int

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[t] for t in TASKS]))

    def csv_row(self, label=None) -> list:
        return [self.epoch if label is None else label, repr(self.loss)] + [repr(self.dice[t]) for t in TASKS]


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    best: EpochRecord | None = None
    best_state: dict | None = None
    steps: int = 0


def batch_order(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    """One epoch of shuffled index batches; the last batch may be short."""
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def train_step(model: Model, images: np.ndarray, masks: dict, lr: float, clip_norm) -> tuple[float, float]:
    params = list(model.params)
    T.zero_grad(params)
    with T.Tape():
        loss = total_loss(model(images), masks)
    T.backward(loss)
    norm = T.clip_grad_norm(params, clip_norm)
    T.sgd_step(params, lr)
    return loss.item(), norm


def predict_samples(model: Model, samples: list[SliceSample], batch_size: int = EVAL_BATCH) -> dict[str, np.ndarray]:
    """Probability maps ``{task: [N, H, W]}`` in sample order."""
    chunks = {t: [] for t in TASKS}
    for i in range(0, len(samples), batch_size):
        images, _ = batch_arrays(samples[i : i + batch_size])
        for t, p in model.predict(images).items():
            chunks[t].append(p)
    return {t: np.concatenate(v) for t, v in chunks.items()}


def mean_dice(model: Model, samples: list[SliceSample]) -> dict[str, float]:
    preds = predict_samples(model, samples)
    _, masks = batch_arrays(samples)
    return {t: float(np.mean([dice_coef(p, y) for p, y in zip(binarize(preds[t]), masks[t])])) for t in TASKS}


def train(
    cfg: RunConfig,
    train_set: list[SliceSample],
    val_set: list[SliceSample] | None = None,
    out_dir: str | Path | None = None,
    model: Model | None = None,
) -> TrainResult:
    """Seeded SGD training; keeps the epoch with the best mean validation Dice.

    Without a validation set, selection falls back to the training Dice.
    """
    if not train_set:
        raise EmptySplitError("training split has no samples")
    side = train_set[0].image.shape[-1]
    if side != cfg.model.image_size:
        raise ConfigurationError(f"slices are {side}x{side} but the model expects image_size {cfg.model.image_size}")
    tc = cfg.train
    if tc.batch_size < 1 or tc.epochs < 1:
        raise ConfigurationError(f"batch size and epochs must be >= 1, got {tc.batch_size}, {tc.epochs}")
    model = model or Model(cfg.model, seed=cfg.seed, precision=cfg.precision)
    rng = Rng(cfg.seed).spawn(1)
    select_on = val_set or train_set
    result = TrainResult(model)
    for epoch in range(1, tc.epochs + 1):
        total, count = 0.0, 0
        for idx in batch_order(len(train_set), tc.batch_size, rng):
            if tc.max_steps is not None and result.steps >= tc.max_steps:
                break
            images, masks = batch_arrays([train_set[i] for i in idx])
            loss, _ = train_step(model, images, masks, tc.lr, tc.clip_norm)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at step {result.steps}")
            total += loss * len(idx)
            count += len(idx)
            result.steps += 1
        if count == 0:
            break
        rec = EpochRecord(epoch, total / count, mean_dice(model, select_on), result.steps)
        result.history.append(rec)
        log.info("epoch %d loss %.4f dice %s", epoch, rec.loss, rec.dice)
        if result.best is None or rec.mean_dice > result.best.mean_dice:
            result.best = rec
            result.best_state = model.params.state()
    if out_dir is not None:
        write_training_outputs(cfg, result, out_dir)
    return result


def write_training_outputs(cfg: RunConfig, result: TrainResult, out_dir: str | Path):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stored = cfg.to_dict()
    stored.pop("out_dir")  # where a run was written is not part of what it is
    meta = {"fingerprint": cfg.fingerprint(), "config": json.dumps(stored, sort_keys=True)}
    result.model.params.save(out / "final.ckpt", epoch=str(result.history[-1].epoch), **meta)
    final_state = result.model.params.state()
    result.model.params.load_state(result.best_state)
    result.model.params.save(out / "best.ckpt", epoch=str(result.best.epoch), **meta)
    result.model.params.load_state(final_state)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rec in result.history:
        w.writerow(rec.csv_row())
    w.writerow(result.best.csv_row("best"))
    (out / "train.csv").write_text(buf.getvalue())


def load_model(path: str | Path, cfg: RunConfig | None = None) -> tuple[Model, RunConfig]:
    """Rebuild a model from a checkpoint (using its embedded config unless one is given)."""
    state, meta = read_checkpoint(path)
    if cfg is None:
        if "config" not in meta:
            raise CheckpointError(f"{path} carries no config; pass one explicitly")
        cfg = RunConfig.from_dict(json.loads(meta["config"]))
    model = Model(cfg.model, seed=cfg.seed, precision=cfg.precision)
    model.params.load_state(state)
    return model, cfg


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    fingerprint: str
    split: str
    n_samples: int
    mode: str
    summary: dict
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def row(self, name: str = "model") -> list:
        vals = [name]
        for k in METRIC_KEYS:
            vals += [self.summary["regions"][r][k] for r in TASKS] + [self.summary["mean"][k]]
        return vals + [self.fingerprint]

    def to_dict(self) -> dict:
        return json_safe({
            "fingerprint": self.fingerprint,
            "split": self.split,
            "n_samples": self.n_samples,
            "mode": self.mode,
            "conventions": self.conventions,
            "summary": self.summary,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self, name: str = "model") -> str:
        return rows_to_csv([self.row(name)])

    def write(self, out_dir: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        j, c = out / f"{stem}.json", out / f"{stem}.csv"
        j.write_text(self.to_json())
        c.write_text(self.to_csv())
        return j, c


def json_safe(x):
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def rows_to_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r[0]] + [repr(float(v)) for v in r[1:-1]] + [r[-1]])
    return buf.getvalue()


def evaluate_predictions(preds: dict[str, np.ndarray], samples: list[SliceSample], volume: bool = False) -> dict:
    """Per-region metric summary of probability (or binary) maps against the samples' masks.

    With ``volume=True`` slices are regrouped by subject and scored as stacks.
    """
    if not samples:
        raise EmptySplitError("cannot evaluate an empty split")
    _, masks = batch_arrays(samples)
    binary = {t: binarize(preds[t]) for t in TASKS}
    if volume:
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            groups.setdefault(s.subject, []).append(i)
        units = list(groups.values())
    else:
        units = [[i] for i in range(len(samples))]
    # a single slice is scored as a one-slice stack, which gives the same distances
    per = [{t: region_metrics(binary[t][idx], masks[t][idx]) for t in TASKS} for idx in units]
    return summarize(per)


def evaluate(model: Model, samples: list[SliceSample], fingerprint: str, split: str = "test", volume: bool = False) -> MetricsReport:
    if not samples:
        raise EmptySplitError(f"split {split!r} has no samples")
    summary = evaluate_predictions(predict_samples(model, samples), samples, volume)
    return MetricsReport(fingerprint, split, len(samples), "volume" if volume else "slice", summary)
