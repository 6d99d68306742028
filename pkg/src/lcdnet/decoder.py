"""Hierarchical decoder with gated levels and two 1x1 logit heads."""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .core import ConvSpec, Tensor, ops
from .core.ops import ShapeError
from .gmm import GMM
from .nn import Conv2d, ConvBN, Module, ModuleList

DEFAULT_WIDTHS = (96, 64, 64, 64, 64)


def decoder_widths(widths: Optional[Sequence[int]] = None) -> Tuple[int, ...]:
    """Per-level channel widths, deepest level first."""
    widths = tuple(DEFAULT_WIDTHS if widths is None else widths)
    if len(widths) != 5:
        raise ValueError(f"need 5 decoder widths, got {len(widths)}")
    if any(int(w) != w or w <= 0 for w in widths):
        raise ValueError(f"decoder widths must be positive integers: {widths}")
    return tuple(int(w) for w in widths)


class DecoderLevel(Module):
    """1x1 reduce -> GMM -> 3x3 conv, with the GMM output added back."""

    def __init__(self, cin: int, width: int, rng: np.random.Generator,
                 use_gmm: bool = True, eps: float = 1e-5, gmm_norm: str = "rms"):
        super().__init__()
        self.reduce = ConvBN(ConvSpec(cin, width, 1), rng, act="relu")
        self.gmm = GMM(width, eps=eps, norm=gmm_norm) if use_gmm else None
        self.spatial = Conv2d(ConvSpec(width, width, 3, padding=1, has_bias=True), rng)

    def forward(self, x: Tensor) -> Tensor:
        z = self.reduce(x)
        if self.gmm is not None:
            z = self.gmm(z)
        return z + ops.relu(self.spatial(z))

    def profile(self, rep, name, shape):
        shape = self.reduce.profile(rep, f"{name}.reduce", shape)
        if self.gmm is not None:
            shape = self.gmm.profile(rep, f"{name}.gmm", shape)
        out = self.spatial.profile(rep, f"{name}.spatial", shape)
        rep.elementwise(f"{name}.relu_residual", out, ops_per_element=2)
        return out


def _upsample(rep, name, shape):
    n, c, h, w = shape
    out = (n, c, 2 * h, 2 * w)
    rep.add(name, out, 0, 4 * c * 4 * h * w)
    return out


class Decoder(Module):
    def __init__(self, in_channels: Sequence[int], widths: Optional[Sequence[int]] = None,
                 rng: Optional[np.random.Generator] = None, use_gmm: bool = True,
                 eps: float = 1e-5, gmm_norm: str = "rms"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = decoder_widths(widths)
        self.in_channels = tuple(in_channels)
        if len(self.in_channels) != 5:
            raise ValueError("decoder needs five pyramid levels")
        levels = []
        prev = 0
        for k, width in enumerate(self.widths):
            skip = self.in_channels[4 - k]
            levels.append(DecoderLevel(prev + skip, width, rng, use_gmm, eps, gmm_norm))
            prev = width
        self.levels = ModuleList(levels)
        self.head0 = Conv2d(ConvSpec(self.widths[4], 1, 1, has_bias=True), rng)
        self.head1 = Conv2d(ConvSpec(self.widths[3], 1, 1, has_bias=True), rng)

    def forward(self, pyramid: Sequence[Tensor]):
        """Return (change-map logits, auxiliary prediction-map logits)."""
        if len(pyramid) != 5:
            raise ShapeError("decoder expects five feature maps")
        for k in range(4):
            h, w = pyramid[k].shape[2:]
            if pyramid[k + 1].shape[2:] != (h // 2, w // 2) or h % 2 or w % 2:
                raise ShapeError(f"pyramid level {k + 1} is not half the size of level {k}")
        d = self.levels[0](pyramid[4])
        outs = [d]
        for k in range(1, 5):
            d = self.levels[k](ops.concat([ops.upsample_bilinear_x2(d), pyramid[4 - k]], axis=1))
            outs.append(d)
        final = ops.upsample_bilinear_x2(outs[4])
        aux = ops.upsample_bilinear_x2(ops.upsample_bilinear_x2(outs[3]))
        return self.head0(final), self.head1(aux)

    def profile(self, rep, name, shapes):
        d = self.levels[0].profile(rep, f"{name}.levels.0", shapes[4])
        outs = [d]
        for k in range(1, 5):
            up = _upsample(rep, f"{name}.levels.{k}.upsample", d)
            skip = shapes[4 - k]
            d = self.levels[k].profile(rep, f"{name}.levels.{k}", (up[0], up[1] + skip[1]) + up[2:])
            outs.append(d)
        final = _upsample(rep, f"{name}.final_upsample", outs[4])
        aux = _upsample(rep, f"{name}.aux_upsample.0", outs[3])
        aux = _upsample(rep, f"{name}.aux_upsample.1", aux)
        o0 = self.head0.profile(rep, f"{name}.head0", final)
        o1 = self.head1.profile(rep, f"{name}.head1", aux)
        return o0, o1
