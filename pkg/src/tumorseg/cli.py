"""Command-line entry point: ``tumorseg {synth,train,eval,gradcheck,ablate}``.

Every command exits 0 on success. On failure it writes one JSON object to
stderr (``{"error": ..., "message": ..., "command": ...}``) and exits 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, RunConfig
from .data import PhantomSpec, dataset_splits, synthesize, volumes_to_slices
from .gradcheck import model_gradcheck
from .training import evaluate, json_safe, load_model, rows_to_csv, train

VARIANTS = ("full",) + tuple(ABLATIONS)
ROW_LABELS = {"full": "full", "mt-aff": "mT-AFF", "mt-tsfi": "mT-TSFI", "mt-fe": "mT-FE"}
GRADCHECK_TOL = 1e-4

log = logging.getLogger("tumorseg")


class CommandError(RuntimeError):
    pass


def load_config(args) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(d)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "precision", None):
        cfg.precision = args.precision
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "ablate", None):
        cfg.model = cfg.model.ablate(args.ablate)
    return cfg


def split_fingerprint(splits: dict) -> str:
    blob = json.dumps({s: [v.subject_id for v in vols] for s, vols in splits.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def emit(obj: dict):
    print(json.dumps(json_safe(obj), sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> dict:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    count = args.count
    if "data" in d:
        # a full run config: take its phantom section
        count = d["data"].get("count", 10) if count is None else count
        d = d["data"].get("phantom", {})
    spec = PhantomSpec.from_dict(d)
    if args.seed is not None:
        spec.seed = args.seed
    count = 10 if count is None else count
    if count < 0:
        raise CommandError(f"count must be >= 0, got {count}")
    out = Path(args.out or "data")
    manifest = synthesize(out, spec, count, split_seed=spec.seed)
    return {"command": "synth", "out": str(out), "subjects": count, "splits": manifest.counts()}


def load_splits(cfg: RunConfig) -> dict:
    splits = dataset_splits(cfg.data, cfg.seed)
    return {s: volumes_to_slices(v, cfg.data.slice_policy) for s, v in splits.items()}, splits


def cmd_train(args) -> dict:
    cfg = load_config(args)
    samples, splits = load_splits(cfg)
    out = Path(cfg.out_dir)
    result = train(cfg, samples["train"], samples["val"], out_dir=out)
    return {
        "command": "train",
        "out": str(out),
        "fingerprint": cfg.fingerprint(),
        "split_fingerprint": split_fingerprint(splits),
        "steps": result.steps,
        "best_epoch": result.best.epoch,
        "best_dice": result.best.dice,
    }


def cmd_eval(args) -> dict:
    cfg = load_config(args) if args.config else None
    model, cfg = load_model(args.checkpoint, cfg)
    if args.manifest:
        cfg.data = dataclasses.replace(cfg.data, manifest=args.manifest)
    samples, _ = load_splits(cfg)
    report = evaluate(model, samples[args.split], cfg.fingerprint(), args.split, volume=args.volume)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    j, c = report.write(out, f"metrics_{args.split}")
    return {"command": "eval", "json": str(j), "csv": str(c), "mean": report.summary["mean"]}


def cmd_gradcheck(args) -> dict:
    d = json.loads(Path(args.config).read_text()) if args.config else {"preset": "tiny"}
    cfg = RunConfig.from_dict(d)
    if args.ablate:
        cfg.model = cfg.model.ablate(args.ablate)
    seed = 0 if args.seed is None else args.seed
    rows, terms = model_gradcheck(cfg.model, args.n, seed=seed)
    lines = [f"{'loss':<6} {'parameter':<48} {'index':<18} {'analytic':>14} {'numeric':>14} {'rel_err':>9}"]
    for r, term in zip(rows, terms):
        mark = "" if r.passed(GRADCHECK_TOL) else "  FAIL"
        lines.append(
            f"{term:<6} {r.param_id:<48} {str(r.index):<18} {r.analytic:>14.6e} {r.numeric:>14.6e} {r.rel_error:>9.2e}{mark}"
        )
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(table)
    print(table, end="")
    failed = sorted({r.param_id for r in rows if not r.passed(GRADCHECK_TOL)})
    worst = max(r.rel_error for r in rows)
    if failed:
        raise CommandError(f"{len(failed)} parameter(s) exceed {GRADCHECK_TOL}: {', '.join(failed)}")
    return {"command": "gradcheck", "entries": len(rows), "max_rel_error": worst, "variant": cfg.model.variant}


def run_ablation(cfg: RunConfig, out: Path | None = None) -> tuple[list[list], dict]:
    """Train and test every variant on one shared split; returns report rows and a summary."""
    samples, splits = load_splits(cfg)
    test = samples["test"] or samples["val"]
    rows, info = [], {"split_fingerprint": split_fingerprint(splits), "variants": {}}
    for variant in VARIANTS:
        vcfg = dataclasses.replace(cfg, model=cfg.model.ablate(variant))
        vout = out / variant if out is not None else None
        result = train(vcfg, samples["train"], samples["val"], out_dir=vout)
        result.model.params.load_state(result.best_state)
        report = evaluate(result.model, test, vcfg.fingerprint(), "test" if samples["test"] else "val")
        rows.append(report.row(ROW_LABELS[variant]))
        info["variants"][variant] = {"fingerprint": vcfg.fingerprint(), "mean_dice": report.summary["mean"]["dice"]}
    return rows, info


def cmd_ablate(args) -> dict:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    rows, info = run_ablation(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(rows_to_csv(rows))
    (out / "ablation.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return {"command": "ablate", "out": str(out), **info}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--ablate", choices=ABLATIONS)
    model_flags.add_argument("--precision", choices=("f32", "f64"))

    p = argparse.ArgumentParser(prog="tumorseg", description="Multi-modal tumour segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a phantom dataset and split manifest")
    s.add_argument("--count", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common, model_flags], help="train and write checkpoints + CSV")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, model_flags], help="score a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--volume", action="store_true", help="score whole volumes instead of slices")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the tiny model")
    s.add_argument("--ablate", choices=ABLATIONS)
    s.add_argument("--n", type=int, default=100, help="number of sampled entries")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", parents=[common, model_flags], help="train and compare all four variants")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        emit(args.func(args))
    except Exception as e:  # noqa: BLE001 - every failure becomes one JSON line
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
