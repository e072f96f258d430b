"""Axial 2-D training samples cut from volumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import MODALITIES
from ..metrics import labels_to_regions
from .phantom import Volume

POLICIES = ("all", "tumor")


@dataclass
class SliceSample:
    image: np.ndarray  # [4, H, W] float32 in (T1, T1Gd, T2, FLAIR) order
    masks: np.ndarray  # [3, H, W] uint8 in (WT, TC, ET) order
    subject: str
    index: int


def extract_slices(vol: Volume, policy: str = "all") -> list[SliceSample]:
    if policy not in POLICIES:
        raise ValueError(f"unknown slice policy {policy!r}; expected one of {POLICIES}")
    wt, tc, et = labels_to_regions(vol.labels)
    out = []
    for z in range(vol.shape[0]):
        if policy == "tumor" and not wt[z].any():
            continue
        image = np.stack([vol.channels[m][z] for m in MODALITIES]).astype(np.float32)
        masks = np.stack([wt[z], tc[z], et[z]]).astype(np.uint8)
        out.append(SliceSample(image, masks, vol.subject_id, z))
    return out


def batch_arrays(samples: list[SliceSample]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Stack samples into ``images [B, 4, H, W]`` and ``{task: masks [B, H, W]}``."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.masks for s in samples])
    return images, {"WT": masks[:, 0], "TC": masks[:, 1], "ET": masks[:, 2]}
