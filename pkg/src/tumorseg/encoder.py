"""Per-modality pyramid encoder built from spatial-reduction attention stages.

Token sequences are ``[B, n, C]`` tensors laid out row-major over the token
grid; feature maps are ``[B, C, H, W]``.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from . import tensor as T
from .config import MODALITIES, ModelConfig, StageConfig
from .params import ParamStore
from .tensor import ConfigurationError, DimensionError, Tensor


class MissingModalityError(ValueError):
    pass


def init_block(store: ParamStore, prefix: str, cfg: StageConfig) -> dict:
    c = cfg.embed_dim
    hidden = c * cfg.mlp_ratio
    r2c = cfg.sr_ratio**2 * c
    return {
        "norm1": store.norm(f"{prefix}.norm1", c),
        "wq": store.uniform(f"{prefix}.attn.wq", (c, c), c),
        "wk": store.uniform(f"{prefix}.attn.wk", (c, c), c),
        "wv": store.uniform(f"{prefix}.attn.wv", (c, c), c),
        "w0": store.uniform(f"{prefix}.attn.w0", (c, c), c),
        "ws": store.uniform(f"{prefix}.attn.sr.w", (r2c, c), r2c),
        "sr_norm": store.norm(f"{prefix}.attn.sr.norm", c),
        "norm2": store.norm(f"{prefix}.norm2", c),
        "wa": store.uniform(f"{prefix}.ffn.wa", (c, hidden), c),
        "ba": store.uniform(f"{prefix}.ffn.ba", (hidden,), c),
        "wb": store.uniform(f"{prefix}.ffn.wb", (hidden, c), hidden),
        "bb": store.uniform(f"{prefix}.ffn.bb", (c,), hidden),
    }


def init_stage(store: ParamStore, prefix: str, cfg: StageConfig, in_channels: int, grid_side: int) -> dict:
    patch_dim = in_channels * cfg.patch_size**2
    c = cfg.embed_dim
    return {
        "embed_w": store.uniform(f"{prefix}.embed.w", (patch_dim, c), patch_dim),
        "embed_b": store.uniform(f"{prefix}.embed.b", (c,), patch_dim),
        "embed_norm": store.norm(f"{prefix}.embed.norm", c),
        "pos": store.uniform(f"{prefix}.pos", (1, grid_side * grid_side, c), c),
        "blocks": [init_block(store, f"{prefix}.block{d}", cfg) for d in range(cfg.depth)],
    }


def stem_kernel(stride: int) -> int:
    """Kernel side giving exactly H/stride outputs at padding 1 (3x3 when stride is 1)."""
    return stride + 2


def init_encoder(store: ParamStore, cfg: ModelConfig) -> dict:
    """Parameters for the stem and stages 1-3 of every modality branch (no sharing)."""
    sides = cfg.grid_sides()
    branches = {}
    for m in MODALITIES:
        stages = []
        in_ch = cfg.stem_channels
        for s in range(1, 4):
            st = cfg.stage(s)
            stages.append(init_stage(store, f"encoder.{m}.stage{s}", st, in_ch, sides[s - 1]))
            in_ch = st.embed_dim
        branches[m] = {"stem": store.conv(f"encoder.{m}.stem", cfg.stem_channels, 1, stem_kernel(cfg.stem_stride)), "stages": stages}
    return branches


def _bias(b: Tensor, ndim: int) -> Tensor:
    return T.reshape(b, (1,) * (ndim - 1) + (b.shape[0],))


def _norm(x: Tensor, p: dict) -> Tensor:
    return T.layer_norm(x, p["g"], p["b"])


def patch_embed(x: Tensor, cfg: StageConfig, p: dict) -> tuple[Tensor, tuple[int, int]]:
    """Split ``x [B, C, H, W]`` into p x p patches and embed them.

    Returns tokens ``[B, HW/p^2, C_s]`` and the token grid shape.
    """
    b, c, h, w = x.shape
    ps = cfg.patch_size
    if h % ps or w % ps:
        raise ConfigurationError(f"spatial extent {h}x{w} is not divisible by patch size {ps}")
    gh, gw = h // ps, w // ps
    patches = T.reshape(x, (b, c, gh, ps, gw, ps))
    patches = T.transpose(patches, (0, 2, 4, 1, 3, 5))
    patches = T.reshape(patches, (b, gh * gw, c * ps * ps))
    alpha = _norm(T.matmul(patches, p["embed_w"]) + _bias(p["embed_b"], 3), p["embed_norm"])
    if p["pos"].shape[1] != gh * gw:
        raise ConfigurationError(
            f"positional embedding holds {p['pos'].shape[1]} tokens but input gives {gh * gw}"
        )
    return alpha + p["pos"], (gh, gw)


def spatial_reduce(seq: Tensor, grid: tuple[int, int], r: int, p: dict) -> Tensor:
    """Group r x r neighbouring tokens, project with W^S, then layer-normalize."""
    b, n, c = seq.shape
    gh, gw = grid
    if gh * gw != n:
        raise DimensionError(f"grid {grid} does not match {n} tokens")
    if gh % r or gw % r:
        raise ConfigurationError(f"token grid {gh}x{gw} is not divisible by SR ratio {r}")
    x = T.reshape(seq, (b, gh // r, r, gw // r, r, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, (gh // r) * (gw // r), r * r * c))
    return _norm(T.matmul(x, p["ws"]), p["sr_norm"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, c = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, c // heads)), (0, 2, 1, 3))


def sra(normed: Tensor, grid: tuple[int, int], cfg: StageConfig, p: dict, return_attention: bool = False):
    """Spatial-reduction multi-head attention on an already-normalized sequence."""
    b, n, c = normed.shape
    if c != cfg.heads * cfg.head_dim:
        raise ConfigurationError(f"channels {c} != heads {cfg.heads} x head_dim {cfg.head_dim}")
    reduced = spatial_reduce(normed, grid, cfg.sr_ratio, p)
    q = _split_heads(T.matmul(normed, p["wq"]), cfg.heads)
    k = _split_heads(T.matmul(reduced, p["wk"]), cfg.heads)
    v = _split_heads(T.matmul(reduced, p["wv"]), cfg.heads)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.head_dim))
    attn = T.softmax(scores, axis=-1)
    heads = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
    out = T.matmul(T.reshape(heads, (b, n, c)), p["w0"])
    return (out, attn) if return_attention else out


def ffn(x: Tensor, p: dict) -> Tensor:
    hidden = T.relu(T.matmul(x, p["wa"]) + _bias(p["ba"], 3))
    return T.matmul(hidden, p["wb"]) + _bias(p["bb"], 3)


def transformer_block(seq: Tensor, grid: tuple[int, int], cfg: StageConfig, p: dict) -> Tensor:
    # residual added once per sublayer
    gamma = sra(_norm(seq, p["norm1"]), grid, cfg, p) + seq
    return ffn(_norm(gamma, p["norm2"]), p) + gamma


def tokens_to_map(seq: Tensor, grid: tuple[int, int]) -> Tensor:
    b, n, c = seq.shape
    return T.reshape(T.transpose(seq, (0, 2, 1)), (b, c) + tuple(grid))


def run_stage(x: Tensor, cfg: StageConfig, p: dict) -> Tensor:
    """Patch embedding, ``depth`` transformer blocks, reshape back to a feature map."""
    seq, grid = patch_embed(x, cfg, p)
    for block in p["blocks"]:
        seq = transformer_block(seq, grid, cfg, block)
    return tokens_to_map(seq, grid)


def stack_modalities(scans: Mapping[str, np.ndarray] | np.ndarray) -> np.ndarray:
    """Order modality images as (T1, T1Gd, T2, FLAIR) along axis 1 -> [B, 4, H, W]."""
    if isinstance(scans, Mapping):
        for m in MODALITIES:
            if m not in scans:
                raise MissingModalityError(f"modality {m} is missing")
        arrays = [np.asarray(scans[m]) for m in MODALITIES]
        shapes = {a.shape for a in arrays}
        if len(shapes) != 1:
            raise DimensionError(f"modality extents differ: {sorted(shapes)}")
        stacked = np.stack(arrays, axis=-3)
    else:
        stacked = np.asarray(scans)
        if stacked.shape[-3] != len(MODALITIES):
            raise MissingModalityError(f"expected {len(MODALITIES)} modality channels, got shape {stacked.shape}")
    return stacked if stacked.ndim == 4 else stacked[None]


def encode(scans, params: dict, cfg: ModelConfig, dtype=np.float32) -> dict[str, list[Tensor]]:
    """Run every modality branch through the stem and stages 1-3.

    Returns ``{modality: [F1, F2, F3]}``; branches never exchange data.
    """
    x = scans if isinstance(scans, Tensor) else Tensor(stack_modalities(scans), dtype=dtype)
    if x.shape[1] != len(MODALITIES):
        raise MissingModalityError(f"expected {len(MODALITIES)} modality channels, got {x.shape[1]}")
    feats = {}
    for i, m in enumerate(MODALITIES):
        branch = params[m]
        xm = Tensor(x.data[:, i : i + 1])
        h = T.conv2d(xm, branch["stem"]["w"], branch["stem"]["b"], stride=cfg.stem_stride, pad=1)
        maps = []
        for s, sp in enumerate(branch["stages"], start=1):
            h = run_stage(h, cfg.stage(s), sp)
            maps.append(h)
        feats[m] = maps
    return feats
