"""Named parameter registry for the whole model."""

from __future__ import annotations

import io
import math
import zipfile
from pathlib import Path

import numpy as np

from .tensor import Parameter, Rng


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered ``id -> Parameter`` map; initial values come from a seeded Rng.

    Weights are uniform in +-sqrt(1/fan_in). Creation order fixes the draw
    order, so the same seed always yields the same model.
    """

    def __init__(self, rng: Rng, dtype=np.float32):
        self.rng = rng
        self.dtype = dtype
        self._params: dict[str, Parameter] = {}

    def _add(self, pid: str, value) -> Parameter:
        if pid in self._params:
            raise KeyError(f"duplicate parameter id {pid!r}")
        p = Parameter(np.asarray(value, dtype=self.dtype), id=pid)
        self._params[pid] = p
        return p

    def uniform(self, pid: str, shape, fan_in: int) -> Parameter:
        bound = math.sqrt(1.0 / fan_in)
        return self._add(pid, self.rng.uniform(-bound, bound, shape))

    def const(self, pid: str, shape, value: float) -> Parameter:
        return self._add(pid, np.full(shape, value))

    def conv(self, pid: str, cout: int, cin: int, k: int) -> dict:
        fan_in = cin * k * k
        return {
            "w": self.uniform(f"{pid}.w", (cout, cin, k, k), fan_in),
            "b": self.uniform(f"{pid}.b", (cout,), fan_in),
        }

    def norm(self, pid: str, c: int) -> dict:
        return {"g": self.const(f"{pid}.g", (c,), 1.0), "b": self.const(f"{pid}.b", (c,), 0.0)}

    def __getitem__(self, pid: str) -> Parameter:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def ids(self) -> list[str]:
        return list(self._params)

    def with_prefix(self, prefix: str) -> list[Parameter]:
        return [p for pid, p in self._params.items() if pid.startswith(prefix)]

    def count(self) -> int:
        return sum(p.size for p in self)

    def state(self) -> dict[str, np.ndarray]:
        return {pid: p.data.copy() for pid, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for pid, p in self._params.items():
            if pid not in state:
                raise CheckpointError(f"checkpoint is missing parameter {pid}")
            if state[pid].shape != p.shape:
                raise CheckpointError(
                    f"parameter {pid}: checkpoint shape {state[pid].shape} != model shape {p.shape}"
                )
        extra = set(state) - set(self._params)
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameter {sorted(extra)[0]}")
        for pid, p in self._params.items():
            p.data = state[pid].astype(self.dtype, copy=True)

    def save(self, path: str | Path, **meta: str):
        """Write an ``.npz`` archive. Zip timestamps are pinned so reruns are byte-identical."""
        arrays = {f"p:{k}": v for k, v in self.state().items()}
        arrays.update({f"m:{k}": np.array(v) for k, v in meta.items()})
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, arr, allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with np.load(path, allow_pickle=False) as npz:
        state = {k[2:]: npz[k] for k in npz.files if k.startswith("p:")}
        meta = {k[2:]: str(npz[k]) for k in npz.files if k.startswith("m:")}
    return state, meta
