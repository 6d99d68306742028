"""Gated channel modulation.

Per sample and channel c::

    ed_c = alpha_c * sqrt(sum_ij x_c[i, j]**2 + eps)
    n_c  = gamma_c / sqrt(mean_k(ed_k**2) + eps)
    g_c  = 1 + tanh(ed_c * n_c + beta_c)
    y    = x * g

``norm="mean_squared"`` swaps the denominator for ``mean_k(ed_k)**2``.
"""

from __future__ import annotations

import numpy as np

from .core import Tensor, ops
from .core.ops import ShapeError
from .nn import Module, Parameter

NORM_MODES = ("rms", "mean_squared")


class GMM(Module):
    def __init__(self, channels: int, eps: float = 1e-5, norm: str = "rms"):
        super().__init__()
        if not 0.0 <= eps <= 1e-5:
            raise ValueError(f"eps must lie in [0, 1e-5], got {eps}")
        if norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}")
        self.channels = channels
        self.eps = eps
        self.norm = norm
        self.alpha = Parameter(np.ones(channels, dtype=np.float32), decay=False)
        self.gamma = Parameter(np.zeros(channels, dtype=np.float32), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=np.float32), decay=False)

    def gate(self, x: Tensor) -> Tensor:
        """The (N, C, 1, 1) gating coefficients for ``x``."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"GMM expects {self.channels} channels, got shape {x.shape}")
        view = (1, self.channels, 1, 1)
        ed = ops.l2_norm_spatial(x, self.eps) * ops.reshape(self.alpha, view)
        if self.norm == "rms":
            denom = ops.mean(ops.square(ed), axis=1, keepdims=True)
        else:
            denom = ops.square(ops.mean(ed, axis=1, keepdims=True))
        n = ops.reshape(self.gamma, view) / ops.sqrt(denom + self.eps)
        return 1.0 + ops.tanh(ed * n + ops.reshape(self.beta, view))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)

    def profile(self, rep, name, shape):
        n, c, h, w = shape
        rep.add(name, shape, self.num_parameters(), 2 * c * h * w + 5 * c)
        return shape
