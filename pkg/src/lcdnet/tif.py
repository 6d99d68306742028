"""Temporal interaction: parameter-free channel swapping between the two streams."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .core import Tensor, ops

EXCHANGE_STAGES = (2, 3, 4)


@lru_cache(maxsize=None)
def _mask(channels: int, fraction: float) -> bytes:
    c = np.arange(channels)
    # evenly spread selection; fraction 1/2 picks channels 0, 2, 4, ...
    picked = np.ceil((c + 1) * fraction - 1e-9) - np.ceil(c * fraction - 1e-9)
    return (picked > 0).tobytes()


def exchange_mask(channels: int, fraction: float = 0.5) -> np.ndarray:
    """Boolean mask over channels; True means the channel is swapped."""
    if channels <= 0:
        raise ValueError("channels must be positive")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return np.frombuffer(_mask(channels, float(fraction)), dtype=bool).copy()


def exchange(f1: Tensor, f2: Tensor, fraction: float = 0.5):
    """Swap the masked channels of two same-shaped feature maps."""
    if f1.shape != f2.shape:
        raise ops.ShapeError(f"exchange needs equal shapes, got {f1.shape} and {f2.shape}")
    return ops.channel_exchange(f1, f2, exchange_mask(f1.shape[1], fraction))


def swapped_count(channels: int, fraction: float = 0.5) -> int:
    return math.ceil(channels * fraction - 1e-9)
