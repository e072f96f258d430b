"""Task-specific decoders with modality routing and curvature-based channel enhancement."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .params import ParamStore
from .tensor import DimensionError, Tensor

CURVATURE_KERNEL = np.array([[-1.0, 5.0, -1.0], [5.0, -16.0, 5.0], [-1.0, 5.0, -1.0]]) / 16.0

# modality feeding the "X" input of the WT/TC decoders; both also take T2
ROUTING = {"WT": "FLAIR", "TC": "T1Gd"}
ET_MODALITY = "T1Gd"


def fe_channels(c: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * c))


def _conv3(store, pid, cout, cin):
    return store.conv(pid, cout, cin, 3)


def init_decoders(store: ParamStore, cfg: ModelConfig) -> dict:
    dims = cfg.embed_dims
    out = {}
    for task in ("WT", "TC"):
        levels = []
        for i in (1, 2, 3):
            c, c_prev = dims[3 - i], dims[4 - i]
            pre = f"decoder.{task}.level{i}"
            levels.append({
                "conv1": _conv3(store, f"{pre}.conv1", c, 2 * c),
                "conv2": _conv3(store, f"{pre}.conv2", c, 2 * c),
                "conv3": _conv3(store, f"{pre}.conv3", c, 2 * c),
                "conv4": _conv3(store, f"{pre}.conv4", c, 2 * c),
                "up": _conv3(store, f"{pre}.up", c, c_prev),
                "conv5": _conv3(store, f"{pre}.conv5", c, 2 * c),
            })
        out[task] = {"levels": levels, "head": store.conv(f"decoder.{task}.head", 1, dims[0], 1)}
    levels = []
    for i in (1, 2, 3):
        c, c_prev = dims[3 - i], dims[4 - i]
        c_in = c + fe_channels(c, cfg.fe_fraction) if (i == 3 and cfg.use_fe) else c
        pre = f"decoder.ET.level{i}"
        levels.append({
            "conv1": _conv3(store, f"{pre}.conv1", c, 2 * c_in),
            "up": _conv3(store, f"{pre}.up", c, c_prev),
            "conv2": _conv3(store, f"{pre}.conv2", c, 2 * c),
        })
    out["ET"] = {"levels": levels, "head": store.conv("decoder.ET.head", 1, dims[0], 1)}
    return out


def _conv(x: Tensor, p: dict) -> Tensor:
    return T.conv2d(x, p["w"], p["b"], pad=p["w"].shape[-1] // 2)


def _check_same_extent(*maps: Tensor):
    extents = {m.shape[-2:] for m in maps}
    if len(extents) != 1:
        raise DimensionError(f"decoder inputs disagree on spatial extent: {sorted(extents)}")


def upsample_to(prev: Tensor, target: Tensor, p: dict) -> Tensor:
    """Bilinear upsampling to the target extent, then a 3x3 conv."""
    factor = target.shape[-1] // prev.shape[-1]
    if factor * prev.shape[-1] != target.shape[-1] or factor * prev.shape[-2] != target.shape[-2]:
        raise DimensionError(f"cannot upsample {prev.shape} onto {target.shape}")
    return _conv(T.upsample_bilinear(prev, factor), p)


def wt_tc_level(common: Tensor, prev: Tensor, f_t2: Tensor, f_x: Tensor, p: dict) -> Tensor:
    """One WT/TC decoder level: routed products, concatenations and convolutions."""
    _check_same_extent(common, f_t2, f_x)
    z1 = _conv(T.concat([f_x * common, common], axis=1), p["conv1"])
    t2_common = f_t2 * common
    z2 = _conv(T.concat([t2_common, common], axis=1), p["conv2"])
    z3 = T.concat([_conv(T.concat([z1, z2], axis=1), p["conv3"]), f_x * t2_common], axis=1)
    return _conv(T.concat([upsample_to(prev, common, p["up"]), _conv(z3, p["conv4"])], axis=1), p["conv5"])


def curvature_map(x: Tensor) -> Tensor:
    """Per-channel response to the fixed curvature kernel (stride 1, zero padding)."""
    return T.depthwise_conv2d(x, CURVATURE_KERNEL, pad=1)


def channel_curvature_scores(x: np.ndarray) -> np.ndarray:
    """Spatial mean of |curvature| for each channel of ``x [B, C, H, W]``."""
    with T.no_grad():
        curv = curvature_map(Tensor(x)).data
    return np.abs(curv.astype(np.float64)).mean(axis=(-2, -1))


def select_channels(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated score: ties go to the lower channel index
    idx = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    T.note_branch(idx)
    return idx


def feature_enhance(x: Tensor, fraction: float) -> Tensor:
    """Append the ceil(K*C) highest-curvature channels (best first) to ``x``."""
    k = fe_channels(x.shape[1], fraction)
    idx = select_channels(channel_curvature_scores(x.data), k)
    return T.concat([x, T.gather_channels(x, idx)], axis=1)


def et_level(common: Tensor, prev: Tensor, f_t1gd: Tensor, p: dict) -> Tensor:
    _check_same_extent(common, f_t1gd)
    z1 = _conv(T.concat([f_t1gd * common, common], axis=1), p["conv1"])
    return _conv(T.concat([upsample_to(prev, common, p["up"]), z1], axis=1), p["conv2"])


def seg_head(f: Tensor, p: dict, out_size: int) -> Tensor:
    """Upsample to the input extent, 1x1 conv to one channel, sigmoid -> [B, H, W]."""
    factor = out_size // f.shape[-1]
    logits = T.conv2d(T.upsample_bilinear(f, factor), p["w"], p["b"])
    b = logits.shape[0]
    return T.reshape(T.sigmoid(logits), (b, out_size, out_size))


def decode_all(common: list[Tensor], feats: dict[str, list[Tensor]], seeds: dict[str, Tensor], p: dict, cfg: ModelConfig) -> dict[str, Tensor]:
    """Run the three task decoders; returns ``{task: probabilities [B, H, W]}``.

    ``common`` and each ``feats[m]`` hold stage-1..3 maps; level i consumes stage 4 - i.
    """
    out = {}
    for task, routed in ROUTING.items():
        f = seeds[task]
        for i, lp in enumerate(p[task]["levels"], start=1):
            s = 3 - i
            fc = common[s]
            if cfg.use_tsfi:
                f = wt_tc_level(fc, f, feats["T2"][s], feats[routed][s], lp)
            else:
                f = wt_tc_level(fc, f, fc, fc, lp)
        out[task] = seg_head(f, p[task]["head"], cfg.image_size)
    f = seeds["ET"]
    for i, lp in enumerate(p["ET"]["levels"], start=1):
        s = 3 - i
        x = common[s]
        x_t1gd = feats[ET_MODALITY][s] if cfg.use_tsfi else x
        if i == 3 and cfg.use_fe:
            x = feature_enhance(x, cfg.fe_fraction)
            x_t1gd = feature_enhance(x_t1gd, cfg.fe_fraction)
        f = et_level(x, f, x_t1gd, lp)
    out["ET"] = seg_head(f, p["ET"]["head"], cfg.image_size)
    return {t: out[t] for t in ("WT", "TC", "ET")}
