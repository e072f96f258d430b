"""Full network: encoder branches -> fusion -> task decoders."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .decoder import decode_all, init_decoders
from .encoder import encode, init_encoder, stack_modalities
from .fusion import fuse_all, init_fusion
from .params import ParamStore
from .tensor import Rng, Tensor

DTYPES = {"f32": np.float32, "f64": np.float64}


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0, precision: str = "f32"):
        self.cfg = cfg.validate()
        self.dtype = DTYPES[precision]
        self.params = ParamStore(Rng(seed), self.dtype)
        self.encoder = init_encoder(self.params, cfg)
        self.fusion = init_fusion(self.params, cfg)
        self.decoders = init_decoders(self.params, cfg)

    def features(self, images) -> dict:
        """All intermediate features for ``images [B, 4, H, W]`` (or a modality mapping)."""
        x = images if isinstance(images, Tensor) else Tensor(stack_modalities(images), dtype=self.dtype)
        feats = encode(x, self.encoder, self.cfg)
        common, f4, seeds = fuse_all(feats, self.fusion, self.cfg)
        return {"modality": feats, "common": common, "f4": f4, "seeds": seeds}

    def forward(self, images) -> dict[str, Tensor]:
        f = self.features(images)
        return decode_all(f["common"], f["modality"], f["seeds"], self.decoders, self.cfg)

    __call__ = forward

    def predict(self, images, nested: bool = False) -> dict[str, np.ndarray]:
        """Probability maps without recording a tape.

        ``nested=True`` intersects the maps so that ET <= TC <= WT pixel-wise.
        """
        with T.no_grad():
            out = {t: p.data for t, p in self.forward(images).items()}
        if nested:
            out["TC"] = np.minimum(out["TC"], out["WT"])
            out["ET"] = np.minimum(out["ET"], out["TC"])
        return out
