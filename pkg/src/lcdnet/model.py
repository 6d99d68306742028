"""Full change-detection network: siamese encoder, channel exchange, fusion, decoder."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .backbone import EncoderConfig, Encoder, check_input_size
from .core import Tensor, archive, as_tensor, no_grad, ops
from .core.ops import ShapeError
from .decoder import Decoder, decoder_widths
from .ffm import FFM, DiffFusion
from .nn import Module, ModuleList
from .tif import EXCHANGE_STAGES, exchange


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_widths: Tuple[int, ...] = (96, 64, 64, 64, 64)
    eps: float = 1e-5
    exchange_fraction: float = 0.5
    use_tif: bool = True
    use_ffm: bool = True
    use_gmm: bool = True
    ffm_literal: bool = False
    gmm_norm: str = "rms"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decoder_widths", decoder_widths(self.decoder_widths))
        if not 0.0 <= self.exchange_fraction <= 1.0:
            raise ValueError("exchange_fraction must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        enc = raw.pop("encoder")
        stages = tuple(tuple(tuple(b) for b in st) for st in enc["stages"])
        raw["decoder_widths"] = tuple(raw["decoder_widths"])
        return cls(encoder=EncoderConfig(enc["stem_channels"], stages), **raw)

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def ablate(self, tif: bool = True, ffm: bool = True, gmm: bool = True) -> "ModelConfig":
        return dataclasses.replace(self, use_tif=tif, use_ffm=ffm, use_gmm=gmm)


class LcdNet(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(config.encoder, rng)
        chans = self.encoder.channels
        if config.use_ffm:
            self.fusion = ModuleList([FFM(c, c, rng, literal=config.ffm_literal) for c in chans])
        else:
            self.fusion = ModuleList([DiffFusion() for _ in chans])
        self.decoder = Decoder(chans, config.decoder_widths, rng, use_gmm=config.use_gmm,
                               eps=config.eps, gmm_norm=config.gmm_norm)

    def encode_pair(self, t1: Tensor, t2: Tensor):
        """Run both images through the shared encoder; returns two 5-level pyramids.

        The two streams travel as one batch (first half T1, second half T2);
        batch-norm statistics are therefore pooled over both.
        """
        x = ops.concat([t1, t2], axis=0)
        p1, p2 = [], []
        for k in range(5):
            x = self.encoder.stage(k, x)
            a, b = ops.split(x, 2, axis=0)
            if self.config.use_tif and k in EXCHANGE_STAGES:
                a, b = exchange(a, b, self.config.exchange_fraction)
                if k < 4:
                    x = ops.concat([a, b], axis=0)
            p1.append(a)
            p2.append(b)
        return p1, p2

    def forward(self, t1, t2):
        t1, t2 = as_tensor(t1), as_tensor(t2)
        if t1.shape != t2.shape:
            raise ShapeError(f"T1 {t1.shape} and T2 {t2.shape} differ in shape")
        check_input_size(t1.shape)
        p1, p2 = self.encode_pair(t1, t2)
        fused = [f(a, b) for f, a, b in zip(self.fusion, p1, p2)]
        return self.decoder(fused)

    def profile(self, rep, hw: Tuple[int, int]):
        check_input_size((1, 3) + tuple(hw))
        shapes = self.encoder.profile(rep, "encoder", (1, 3) + tuple(hw), streams=2)
        # channel exchange is a permutation: zero parameters, zero MACs
        if self.config.use_tif:
            for k in EXCHANGE_STAGES:
                n, c, h, w = shapes[k]
                rep.add(f"tif.{k}", (2 * n, c, h, w), 0, 0)
        fused = [f.profile(rep, f"fusion.{k}", s) for k, (f, s) in enumerate(zip(self.fusion, shapes))]
        widths = ",".join(str(w) for w in self.config.decoder_widths)
        rep.notes.append(f"decoder widths {widths} (deepest level first) set the decoder share; "
                         "the encoder and fusion are fixed by the backbone channels")
        return self.decoder.profile(rep, "decoder", fused)


def logits_to_mask(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logits) > threshold, evaluated in logit space so 0 and 1 behave exactly."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    z = np.asarray(logits, dtype=np.float64)
    if threshold == 0.0:
        return np.ones(z.shape, dtype=np.uint8)
    if threshold == 1.0:
        return np.zeros(z.shape, dtype=np.uint8)
    cut = np.log(threshold) - np.log1p(-threshold)
    return (z > cut).astype(np.uint8)


def predict(model: LcdNet, t1, t2, threshold: float = 0.5) -> np.ndarray:
    """Binary change mask of shape (N, 1, H, W) with values in {0, 1}."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits0, _ = model(t1, t2)
    finally:
        model.train(was_training)
    return logits_to_mask(logits0.data, threshold)


def save_checkpoint(model: LcdNet, path, **metadata) -> None:
    meta = {"config": model.config.to_json(), "config_hash": model.config.hash()}
    meta.update({k: str(v) for k, v in metadata.items()})
    archive.save(path, model.state_dict(), meta)


def load_checkpoint(path) -> Tuple[LcdNet, dict]:
    tensors, meta = archive.load(path)
    if "config" not in meta:
        raise archive.ArchiveError("checkpoint lacks a model config")
    model = LcdNet(ModelConfig.from_json(meta["config"]))
    model.load_state_dict(tensors, strict=True)
    return model, meta
