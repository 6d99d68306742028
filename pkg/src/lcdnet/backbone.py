"""MobileNetV2 feature extractor without its pooling/classifier head.

The standard inverted-residual schedule is regrouped into five stages that
each contain exactly one stride-2 layer, so stage ``k`` emits features at
``1 / 2**(k + 1)`` of the input resolution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import ConvSpec, Tensor, archive
from .core.ops import ShapeError
from .nn import ConvBN, Module, ModuleList

# (expand ratio t, output channels c, repeats n, first stride s)
Block = Tuple[int, int, int, int]

DEFAULT_STAGES: Tuple[Tuple[Block, ...], ...] = (
    ((1, 16, 1, 1),),
    ((6, 24, 2, 2),),
    ((6, 32, 3, 2),),
    ((6, 64, 4, 2), (6, 96, 3, 1)),
    ((6, 160, 3, 2), (6, 320, 1, 1)),
)


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 32
    stages: Tuple[Tuple[Block, ...], ...] = DEFAULT_STAGES

    def __post_init__(self):
        if self.stem_channels <= 0:
            raise ValueError("stem_channels must be positive")
        if len(self.stages) != 5:
            raise ValueError(f"expected 5 stages, got {len(self.stages)}")
        for k, stage in enumerate(self.stages):
            if not stage:
                raise ValueError(f"stage {k} is empty")
            strides = sum(1 for t, c, n, s in stage if s == 2)
            for t, c, n, s in stage:
                if t <= 0 or c <= 0 or n <= 0 or s not in (1, 2):
                    raise ValueError(f"invalid block {(t, c, n, s)} in stage {k}")
            # the stem supplies stage 0's downsampling
            if strides != (0 if k == 0 else 1) or (k > 0 and stage[0][3] != 2):
                raise ValueError(f"stage {k} must downsample exactly once, at its entry")

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        return tuple(stage[-1][1] for stage in self.stages)


class InvertedResidual(Module):
    """1x1 expand -> 3x3 depthwise -> linear 1x1 project, with identity skip when shapes allow."""

    def __init__(self, cin: int, cout: int, stride: int, t: int, rng: np.random.Generator):
        super().__init__()
        hidden = cin * t
        self.cin, self.cout, self.stride, self.t = cin, cout, stride, t
        self.use_skip = stride == 1 and cin == cout
        self.expand = ConvBN(ConvSpec(cin, hidden, 1), rng) if t != 1 else None
        self.depthwise = ConvBN(ConvSpec(hidden, hidden, 3, stride=stride, padding=1, groups=hidden), rng)
        self.project = ConvBN(ConvSpec(hidden, cout, 1), rng, act=None)

    def forward(self, x: Tensor) -> Tensor:
        y = self.expand(x) if self.expand is not None else x
        y = self.project(self.depthwise(y))
        return x + y if self.use_skip else y

    def profile(self, rep, name, shape, streams=1):
        y = shape
        if self.expand is not None:
            y = self.expand.profile(rep, f"{name}.expand", y, streams)
        y = self.depthwise.profile(rep, f"{name}.depthwise", y, streams)
        y = self.project.profile(rep, f"{name}.project", y, streams)
        if self.use_skip:
            rep.elementwise(f"{name}.skip_add", y, streams)
        return y


class Stage(Module):
    def __init__(self, layers: Sequence[Module]):
        super().__init__()
        self.layers = ModuleList(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def profile(self, rep, name, shape, streams=1):
        for i, layer in enumerate(self.layers):
            shape = layer.profile(rep, f"{name}.layers.{i}", shape, streams)
        return shape


class Encoder(Module):
    def __init__(self, config: EncoderConfig = EncoderConfig(), rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        stages = []
        cin = config.stem_channels
        for k, stage_def in enumerate(config.stages):
            layers: List[Module] = []
            if k == 0:
                layers.append(ConvBN(ConvSpec(3, config.stem_channels, 3, stride=2, padding=1), rng))
            for t, c, n, s in stage_def:
                for i in range(n):
                    layers.append(InvertedResidual(cin, c, s if i == 0 else 1, t, rng))
                    cin = c
            stages.append(Stage(layers))
        self.stages = ModuleList(stages)

    @property
    def channels(self) -> Tuple[int, ...]:
        return self.config.stage_channels

    def stage(self, k: int, x: Tensor) -> Tensor:
        return self.stages[k](x)

    def forward(self, image: Tensor) -> List[Tensor]:
        """Return the five stage outputs for a batch of normalized images."""
        check_input_size(image.shape)
        feats = []
        x = image
        for k in range(5):
            x = self.stage(k, x)
            feats.append(x)
        return feats

    encode = forward

    def profile(self, rep, name, shape, streams=1):
        outs = []
        for k, stage in enumerate(self.stages):
            shape = stage.profile(rep, f"{name}.stages.{k}", shape, streams)
            outs.append(shape)
        return outs


def check_input_size(shape: tuple) -> None:
    if len(shape) != 4 or shape[1] != 3:
        raise ShapeError(f"expected (N, 3, H, W) images, got {shape}")
    if shape[2] % 32 or shape[3] % 32 or shape[2] == 0 or shape[3] == 0:
        raise ShapeError(f"image size {shape[2]}x{shape[3]} is not a positive multiple of 32")


def build_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> Encoder:
    return Encoder(config, np.random.default_rng(seed))


def load_pretrained(encoder: Encoder, path) -> Encoder:
    """Copy encoder weights from a named-tensor archive.

    Accepts archives holding bare encoder names or a whole-model checkpoint
    whose encoder names carry an ``encoder.`` prefix; other names are ignored.
    """
    tensors, _ = archive.load(path)
    state = {}
    for name, arr in tensors.items():
        if name.startswith("encoder."):
            state[name[len("encoder."):]] = arr
        elif name.startswith("stages."):
            state[name] = arr
    encoder.load_state_dict(state, strict=True)
    return encoder


def maybe_load_pretrained(encoder: Encoder, path: Optional[str]) -> Encoder:
    if path is None or not os.path.exists(path):
        if path is not None:
            raise FileNotFoundError(f"pretrained weights not found: {path}")
        return encoder
    return load_pretrained(encoder, path)


def save_encoder(encoder: Encoder, path) -> None:
    archive.save(path, encoder.state_dict(), {"kind": "encoder"})


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, 3) or (N, 3, H, W) -> float32 NCHW scaled to [-1, 1]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.transpose(0, 3, 1, 2)
    x = x.astype(np.float32) / 255.0
    return np.ascontiguousarray((x - 0.5) / 0.5)
