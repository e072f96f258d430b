"""Synthetic multi-modal tumour phantoms with nested ellipsoidal sub-regions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import MODALITIES
from ..tensor import ConfigurationError, Rng

# Intensity per tissue class: (background, ED label 2, NCR/NET label 1, ET label 4).
# ET and NCR differ only in T1Gd, FLAIR marks the whole tumour, T1Gd the core.
DEFAULT_CONTRAST = {
    "T1": (0.50, 0.40, 0.30, 0.30),
    "T1Gd": (0.45, 0.45, 0.20, 0.95),
    "T2": (0.35, 0.80, 0.75, 0.75),
    "FLAIR": (0.30, 0.90, 0.65, 0.65),
}


@dataclass
class Volume:
    subject_id: str
    channels: dict[str, np.ndarray]
    labels: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.labels.shape

    def __post_init__(self):
        for m in MODALITIES:
            if m not in self.channels:
                raise ValueError(f"volume {self.subject_id} lacks modality {m}")
            if self.channels[m].shape != self.labels.shape:
                raise ValueError(f"modality {m} shape {self.channels[m].shape} != labels {self.labels.shape}")
        bad = np.setdiff1d(np.unique(self.labels), (0, 1, 2, 4))
        if bad.size:
            raise ValueError(f"illegal label value {bad[0]}")


@dataclass
class PhantomSpec:
    shape: tuple = (8, 64, 64)
    tumor_count: tuple = (1, 1)
    wt_radius: tuple = (13.0, 20.0)
    depth_radius: tuple = (5.0, 7.0)
    tc_fraction: tuple = (0.55, 0.75)
    ncr_fraction: tuple = (0.4, 0.6)
    contrast: dict = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    noise: float = 0.05
    seed: int = 0

    def validate(self):
        d, h, w = self.shape
        if self.wt_radius[0] <= 0 or 2 * self.wt_radius[1] > min(h, w):
            raise ConfigurationError(f"whole-tumour radius {self.wt_radius} does not fit grid {self.shape}")
        if self.depth_radius[0] <= 0:
            raise ConfigurationError(f"depth radius must be positive, got {self.depth_radius}")
        for name in ("tc_fraction", "ncr_fraction"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi < 1:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {(lo, hi)}")
        if self.tumor_count[0] < 0 or self.tumor_count[1] < self.tumor_count[0]:
            raise ConfigurationError(f"bad tumour count range {self.tumor_count}")
        missing = set(MODALITIES) - set(self.contrast)
        if missing:
            raise ConfigurationError(f"contrast profile lacks {sorted(missing)}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if "contrast" in d:
            d["contrast"] = {k: tuple(v) for k, v in d["contrast"].items()}
        return cls(**d)


def _ellipsoid(grid, center, radii) -> np.ndarray:
    zz, yy, xx = grid
    return ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec, subject_id: str = "phantom", seed: int | None = None) -> Volume:
    """Deterministic phantom; labels are nested so ET in TC in WT holds by construction."""
    spec.validate()
    rng = Rng(spec.seed if seed is None else seed)
    d, h, w = spec.shape
    grid = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    labels = np.zeros(spec.shape, dtype=np.uint8)
    n_tumors = int(rng.integers(spec.tumor_count[0], spec.tumor_count[1] + 1))
    for _ in range(n_tumors):
        ry, rx = rng.uniform(*spec.wt_radius, 2)
        rz = rng.uniform(*spec.depth_radius)
        center = (
            rng.uniform(0.3 * (d - 1), 0.7 * (d - 1)),
            rng.uniform(ry, h - 1 - ry),
            rng.uniform(rx, w - 1 - rx),
        )
        wt_r = np.array([rz, ry, rx])
        tc_r = wt_r * rng.uniform(*spec.tc_fraction)
        ncr_r = tc_r * rng.uniform(*spec.ncr_fraction)
        # inner centres jitter but stay nested because each level is intersected with its parent
        tc_c = np.array(center) + rng.uniform(-0.15, 0.15, 3) * (wt_r - tc_r)
        ncr_c = tc_c + rng.uniform(-0.15, 0.15, 3) * (tc_r - ncr_r)
        wt = _ellipsoid(grid, center, wt_r)
        tc = wt & _ellipsoid(grid, tc_c, tc_r)
        ncr = tc & _ellipsoid(grid, ncr_c, ncr_r)
        labels[wt & (labels == 0)] = 2
        labels[tc & (labels != 1)] = 4
        labels[ncr] = 1
    tissue = np.select([labels == 2, labels == 1, labels == 4], [1, 2, 3], 0)
    channels = {}
    for m in MODALITIES:
        profile = np.asarray(spec.contrast[m], dtype=np.float64)
        img = profile[tissue]
        if spec.noise > 0:
            img = np.clip(img + rng.normal(spec.shape, spec.noise), 0.0, 1.0)
        channels[m] = img.astype(np.float32)
    return Volume(subject_id, channels, labels)


def minmax_normalize(img: np.ndarray) -> np.ndarray:
    """Per-channel min-max scaling to [0, 1]; constant images map to 0."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)
