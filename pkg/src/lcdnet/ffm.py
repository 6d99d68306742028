"""Feature fusion: multiplicative cross-stream fusion of one pyramid level.

Default dataflow, with ``conv1`` shared by both inputs::

    a = conv1(x1);  b = conv1(x2)
    s1 = relu(a) * b
    s2 = conv2(s1) + b
    out = relu(s2 * a)

``literal=True`` instead reproduces the reference PyTorch-style listing line
for line (its ``conv1(x1)`` result is overwritten and ``conv2`` is unused).
"""

from __future__ import annotations

import numpy as np

from .core import ConvSpec, Tensor, ops
from .core.ops import ShapeError
from .nn import Conv2d, Module


class FFM(Module):
    def __init__(self, in_planes1: int, in_planes2: int, rng: np.random.Generator,
                 literal: bool = False):
        super().__init__()
        self.in_planes1, self.in_planes2 = in_planes1, in_planes2
        self.literal = literal
        self.conv1 = Conv2d(ConvSpec(in_planes1, in_planes2, 1, has_bias=True), rng)
        self.conv2 = Conv2d(ConvSpec(in_planes2, in_planes2, 1, has_bias=True), rng)

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        if x1.shape != x2.shape:
            raise ShapeError(f"FFM inputs differ in shape: {x1.shape} vs {x2.shape}")
        if x1.shape[1] != self.in_planes1:
            raise ShapeError(f"FFM expects {self.in_planes1} channels, got {x1.shape[1]}")
        if self.literal:
            return self._listing(x1, x2)
        a = self.conv1(x1)
        b = self.conv1(x2)
        s1 = ops.relu(a) * b
        s2 = self.conv2(s1) + b
        return ops.relu(s2 * a)

    def _listing(self, x1, x2):
        out_x1 = ops.relu(x1)
        out_x2 = self.conv1(x2)
        out = ops.relu(out_x1 * out_x2)
        out = out + x2
        out = out * x1
        return ops.relu(out)

    def profile(self, rep, name, shape):
        n, c, h, w = shape
        if self.literal:
            self.conv1.profile(rep, f"{name}.conv1", shape)
            rep.add(f"{name}.conv2", (n, self.in_planes2, h, w), self.conv2.num_parameters(), 0)
            rep.elementwise(f"{name}.fuse", (n, self.in_planes2, h, w), ops_per_element=6)
        else:
            out = self.conv1.profile(rep, f"{name}.conv1", shape, applications=2)
            self.conv2.profile(rep, f"{name}.conv2", out)
            # relu, multiply, add, multiply, relu
            rep.elementwise(f"{name}.fuse", out, ops_per_element=5)
        return (n, self.in_planes2, h, w)


class DiffFusion(Module):
    """Parameter-free stand-in used when FFM is ablated: |x1 - x2|."""

    def forward(self, x1: Tensor, x2: Tensor) -> Tensor:
        if x1.shape != x2.shape:
            raise ShapeError(f"fusion inputs differ in shape: {x1.shape} vs {x2.shape}")
        return ops.abs(x1 - x2)

    def profile(self, rep, name, shape):
        rep.elementwise(name, shape, ops_per_element=2)
        return shape
