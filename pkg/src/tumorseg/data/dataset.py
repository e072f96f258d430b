"""Assembling subjects into split datasets, on disk or in memory."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..config import MODALITIES, DataConfig
from ..tensor import ConfigurationError
from .nifti import read_nifti1
from .phantom import PhantomSpec, Volume, generate_phantom, minmax_normalize
from .slices import SliceSample, extract_slices
from .store import DatasetManifest, ManifestEntry, read_volume, split_dataset, write_volume

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
NIFTI_LABELS = "seg"


def subject_id(i: int) -> str:
    return f"phantom_{i:04d}"


def phantom_volumes(spec: PhantomSpec, count: int) -> list[Volume]:
    """``count`` phantoms; subject ``i`` uses seed ``spec.seed + i``."""
    spec.validate()
    return [generate_phantom(spec, subject_id(i), seed=spec.seed + i) for i in range(count)]


def synthesize(out_dir: str | Path, spec: PhantomSpec, count: int, split_seed: int) -> DatasetManifest:
    """Write ``count`` phantoms in the native format plus a split manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if count == 0:
        log.warning("count is 0: writing an empty manifest")
    entries = []
    for vol in phantom_volumes(spec, count):
        write_volume(vol, out)
        entries.append(ManifestEntry(vol.subject_id, vol.subject_id))
    manifest = split_dataset(DatasetManifest(entries), split_seed) if entries else DatasetManifest([], split_seed)
    manifest.save(out / MANIFEST_NAME)
    return manifest


def read_nifti_subject(path: str | Path) -> Volume:
    """A directory holding ``T1.nii``, ``T1Gd.nii``, ``T2.nii``, ``FLAIR.nii`` and ``seg.nii``.

    Each modality is min-max scaled to [0, 1] per volume.
    """
    path = Path(path)
    channels = {m: minmax_normalize(read_nifti1(path / f"{m}.nii")[0]) for m in MODALITIES}
    labels = read_nifti1(path / f"{NIFTI_LABELS}.nii")[0]
    return Volume(path.name, channels, np.rint(labels).astype(np.uint8))


def load_subject(path: str | Path) -> Volume:
    path = Path(path)
    if (path / "meta.json").exists():
        return read_volume(path)
    if (path / f"{NIFTI_LABELS}.nii").exists():
        return read_nifti_subject(path)
    raise FileNotFoundError(f"{path} holds neither meta.json nor {NIFTI_LABELS}.nii")


def manifest_volumes(manifest_path: str | Path, split: str | None = None) -> list[Volume]:
    """Volumes of one split; entry paths are relative to the manifest's directory."""
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    return [load_subject(manifest_path.parent / e.path) for e in manifest.subjects(split)]


def dataset_splits(data: DataConfig, split_seed: int) -> dict[str, list[Volume]]:
    """Train/val/test volumes from a manifest, or from in-memory phantoms split by ``split_seed``."""
    if data.manifest:
        return {s: manifest_volumes(data.manifest, s) for s in ("train", "val", "test")}
    if data.count < 1:
        raise ConfigurationError("phantom dataset needs count >= 1")
    vols = phantom_volumes(PhantomSpec.from_dict(data.phantom), data.count)
    manifest = split_dataset(DatasetManifest([ManifestEntry(v.subject_id, "") for v in vols]), split_seed)
    by_id = {v.subject_id: v for v in vols}
    return {s: [by_id[e.subject] for e in manifest.subjects(s)] for s in ("train", "val", "test")}


def volumes_to_slices(vols: list[Volume], policy: str) -> list[SliceSample]:
    return [s for v in vols for s in extract_slices(v, policy)]
