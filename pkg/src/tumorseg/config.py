"""Model and run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .tensor import ConfigurationError

MODALITIES = ("T1", "T1Gd", "T2", "FLAIR")
TASKS = ("WT", "TC", "ET")
ABLATIONS = ("mt-aff", "mt-tsfi", "mt-fe")


@dataclass(frozen=True)
class StageConfig:
    patch_size: int
    embed_dim: int
    heads: int
    sr_ratio: int
    depth: int = 1
    mlp_ratio: int = 4

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self):
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} is not heads*head_dim for {self.heads} heads"
            )
        if self.patch_size < 1 or self.sr_ratio < 1 or self.depth < 0:
            raise ConfigurationError(f"invalid stage config {self}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    stem_channels: int = 8
    stem_stride: int = 1
    patch_sizes: tuple = (4, 2, 2, 2)
    embed_dims: tuple = (16, 32, 64, 128)
    heads: tuple = (1, 2, 4, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    depths: tuple = (1, 1, 1, 1)
    mlp_ratio: int = 4
    se_reduction: int = 4
    fe_fraction: float = 0.5
    use_aff: bool = True
    use_tsfi: bool = True
    use_fe: bool = True

    def stage(self, s: int) -> StageConfig:
        """Stage ``s`` in 1..4."""
        i = s - 1
        return StageConfig(
            self.patch_sizes[i], self.embed_dims[i], self.heads[i], self.sr_ratios[i], self.depths[i], self.mlp_ratio
        )

    def grid_sides(self) -> list[int]:
        """Token-grid side length of each of the four stages."""
        side = self.image_size // self.stem_stride
        out = []
        for p in self.patch_sizes:
            side //= p
            out.append(side)
        return out

    def validate(self):
        for name in ("patch_sizes", "embed_dims", "heads", "sr_ratios", "depths"):
            if len(getattr(self, name)) != 4:
                raise ConfigurationError(f"{name} needs four entries")
        if self.image_size % self.stem_stride:
            raise ConfigurationError(f"image size {self.image_size} not divisible by stem stride")
        side = self.image_size // self.stem_stride
        for s in range(1, 5):
            st = self.stage(s)
            st.validate()
            if side % st.patch_size:
                raise ConfigurationError(f"stage {s}: extent {side} not divisible by patch size {st.patch_size}")
            side //= st.patch_size
            if side % st.sr_ratio:
                raise ConfigurationError(f"stage {s}: grid side {side} not divisible by SR ratio {st.sr_ratio}")
        for s in range(1, 4):
            if (4 * self.embed_dims[s - 1]) % self.se_reduction:
                raise ConfigurationError(f"SE reduction {self.se_reduction} does not divide {4 * self.embed_dims[s - 1]}")
        if not 0 < self.fe_fraction <= 1:
            raise ConfigurationError(f"FE fraction must lie in (0, 1], got {self.fe_fraction}")
        return self

    def ablate(self, variant: str | None) -> "ModelConfig":
        if variant in (None, "", "full"):
            return self
        if variant == "mt-aff":
            return replace(self, use_aff=False)
        if variant == "mt-tsfi":
            return replace(self, use_tsfi=False)
        if variant == "mt-fe":
            return replace(self, use_fe=False)
        raise ConfigurationError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")

    @property
    def variant(self) -> str:
        off = [name for name, flag in (("mt-aff", self.use_aff), ("mt-tsfi", self.use_tsfi), ("mt-fe", self.use_fe)) if not flag]
        return "+".join(off) if off else "full"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d).validate()


TINY = ModelConfig(
    image_size=16,
    stem_channels=4,
    patch_sizes=(2, 2, 2, 2),
    embed_dims=(8, 16, 32, 64),
)
DESK = ModelConfig()


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 4
    # global gradient-norm cap; the pixel-summed loss diverges under plain SGD without it
    clip_norm: float | None = 10.0
    # number of optimizer steps cap; None means full epochs
    max_steps: int | None = None


@dataclass
class DataConfig:
    manifest: str | None = None
    slice_policy: str = "tumor"
    phantom: dict = field(default_factory=dict)
    # subjects generated in memory when no manifest is given
    count: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out_dir: str = "runs"
    precision: str = "f32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["model"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        preset = d.pop("preset", None)
        base = {"tiny": TINY, "desk": DESK, "full-scale": DESK, None: DESK}.get(preset)
        if base is None:
            raise ConfigurationError(f"unknown preset {preset!r}")
        model = asdict(base)
        model.update(d.pop("model", {}))
        train = d.pop("train", {})
        if preset == "full-scale":
            train = {"batch_size": 12, "epochs": 100, **train}
        cfg = cls(
            model=ModelConfig.from_dict(model),
            train=TrainConfig(**train),
            data=DataConfig(**d.pop("data", {})),
            **d,
        )
        if cfg.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be f32 or f64, got {cfg.precision!r}")
        return cfg

    def fingerprint(self) -> str:
        """Hash of everything that shapes the trained model (not output paths)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
