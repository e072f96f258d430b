"""Adaptive feature fusion of the four modality branches, plus the shared stage 4."""

from __future__ import annotations

from . import tensor as T
from .config import MODALITIES, TASKS, ModelConfig
from .encoder import init_stage, run_stage
from .params import ParamStore
from .tensor import DimensionError, Tensor


def init_aff(store: ParamStore, prefix: str, channels: int, reduction: int) -> dict:
    wide = len(MODALITIES) * channels
    return {
        "se1": store.conv(f"{prefix}.se1", wide // reduction, wide, 1),
        "se2": store.conv(f"{prefix}.se2", wide, wide // reduction, 1),
        "fuse": store.conv(f"{prefix}.fuse", channels, wide, 3),
    }


def init_fusion(store: ParamStore, cfg: ModelConfig) -> dict:
    sides = cfg.grid_sides()
    c4 = cfg.embed_dims[3]
    return {
        "aff": [init_aff(store, f"fusion.aff{s}", cfg.embed_dims[s - 1], cfg.se_reduction) for s in range(1, 4)],
        "stage4": init_stage(store, "fusion.stage4", cfg.stage(4), cfg.embed_dims[2], sides[3]),
        "seeds": {t: store.conv(f"fusion.seed.{t}", c4, c4, 1) for t in TASKS},
    }


def channel_weights(phi: Tensor, p: dict) -> Tensor:
    """Squeeze-and-excitation weights ``[B, 4C, 1, 1]`` in (0, 1)."""
    pooled = T.avg_pool(phi, "global")
    hidden = T.leaky_relu(T.conv2d(pooled, p["se1"]["w"], p["se1"]["b"]))
    return T.sigmoid(T.conv2d(hidden, p["se2"]["w"], p["se2"]["b"]))


def se_recalibrate(maps: list[Tensor], p: dict) -> Tensor:
    """Concatenate the modality maps (T1, T1Gd, T2, FLAIR order) and reweight channels."""
    if len(maps) != len(MODALITIES):
        raise DimensionError(f"expected {len(MODALITIES)} modality maps, got {len(maps)}")
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"modality feature shapes differ: {sorted(shapes)}")
    phi = T.concat(maps, axis=1)
    return channel_weights(phi, p) * phi


def fuse(theta: Tensor, p: dict) -> Tensor:
    w = p["fuse"]["w"]
    if theta.shape[1] != w.shape[1]:
        raise DimensionError(f"fusion conv expects {w.shape[1]} channels, got {theta.shape[1]}")
    return T.conv2d(theta, w, p["fuse"]["b"], pad=w.shape[-1] // 2)


def element_weights(phi: Tensor) -> Tensor:
    return T.sigmoid(T.avg_pool(phi, "local", 3))


def element_enhance(phi: Tensor) -> Tensor:
    return phi * element_weights(phi)


def aff(maps: list[Tensor], p: dict, enabled: bool = True) -> Tensor:
    """Fused common feature for one stage.

    With ``enabled=False`` (the mT-AFF ablation) only concatenation and the
    fusion convolution remain.
    """
    if not enabled:
        if len({m.shape for m in maps}) != 1:
            raise DimensionError("modality feature shapes differ")
        return fuse(T.concat(maps, axis=1), p)
    return element_enhance(fuse(se_recalibrate(maps, p), p))


def stage4(f3: Tensor, cfg: ModelConfig, p: dict) -> tuple[Tensor, dict[str, Tensor]]:
    """Single-branch bottleneck stage and the three task seeds."""
    f4 = run_stage(f3, cfg.stage(4), p["stage4"])
    seeds = {t: T.conv2d(f4, p["seeds"][t]["w"], p["seeds"][t]["b"]) for t in TASKS}
    return f4, seeds


def fuse_all(feats: dict[str, list[Tensor]], p: dict, cfg: ModelConfig):
    """Common features [F1, F2, F3], F4 and task seeds from the per-modality features."""
    common = [aff([feats[m][s] for m in MODALITIES], p["aff"][s], cfg.use_aff) for s in range(3)]
    f4, seeds = stage4(common[2], cfg, p)
    return common, f4, seeds
