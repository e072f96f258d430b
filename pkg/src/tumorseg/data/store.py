"""Native on-disk volume format, dataset manifests and subject-level splitting.

A stored subject is a directory holding ``meta.json`` plus one raw
little-endian array per channel (``T1.raw`` ... ``FLAIR.raw``, ``labels.raw``).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import MODALITIES
from ..tensor import Rng
from .phantom import Volume

log = logging.getLogger(__name__)

LABEL_LEGEND = {"0": "background", "1": "NCR/NET", "2": "ED", "4": "ET"}
SPLITS = ("train", "val", "test")


def write_volume(vol: Volume, root: str | Path) -> Path:
    out = Path(root) / vol.subject_id
    out.mkdir(parents=True, exist_ok=True)
    arrays = {**{m: vol.channels[m].astype("<f4") for m in MODALITIES}, "labels": vol.labels.astype("u1")}
    meta = {
        "subject": vol.subject_id,
        "shape": list(vol.shape),
        "endianness": "little",
        "channels": {name: arr.dtype.str for name, arr in arrays.items()},
        "label_legend": LABEL_LEGEND,
    }
    for name, arr in arrays.items():
        (out / f"{name}.raw").write_bytes(arr.tobytes())
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def read_volume(path: str | Path) -> Volume:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    shape = tuple(meta["shape"])
    arrays = {}
    for name, dtype in meta["channels"].items():
        raw = (path / f"{name}.raw").read_bytes()
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path / name}.raw holds {arr.size} values, expected {int(np.prod(shape))}")
        arrays[name] = arr.reshape(shape).copy()
    labels = arrays.pop("labels")
    return Volume(meta["subject"], {m: arrays[m].astype(np.float32) for m in MODALITIES}, labels)


@dataclass
class ManifestEntry:
    subject: str
    path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split_seed: int | None = None

    def subjects(self, split: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries if split is None or e.split == split]

    def counts(self) -> dict[str, int]:
        return {s: len(self.subjects(s)) for s in SPLITS}

    def to_json(self) -> str:
        d = {"split_seed": self.split_seed, "entries": [vars(e) for e in self.entries]}
        return json.dumps(d, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls([ManifestEntry(**e) for e in d["entries"]], d.get("split_seed"))

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        return cls.from_json(Path(path).read_text())


def split_counts(n: int) -> tuple[int, int, int]:
    """8:1:1 with floor for train and val; test takes the remainder."""
    n_train = n * 8 // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Seeded subject-level shuffle into train/val/test; entry order is kept."""
    n = len(manifest.entries)
    if n < 10:
        log.warning("only %d subjects: the 8:1:1 split is degenerate", n)
    n_train, n_val, _ = split_counts(n)
    order = Rng(seed).permutation(n)
    tags = [""] * n
    for rank, i in enumerate(order):
        tags[i] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    entries = [ManifestEntry(e.subject, e.path, tag) for e, tag in zip(manifest.entries, tags)]
    return DatasetManifest(entries, seed)
