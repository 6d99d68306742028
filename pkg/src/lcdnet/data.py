"""Bitemporal datasets: loading, tiling, augmentation and a synthetic generator.

On-disk layout (8-bit PNG)::

    root/<split>/A/<name>.png      image at T1, RGB
    root/<split>/B/<name>.png      image at T2, RGB
    root/<split>/label/<name>.png  single channel, 0 or 255
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .metrics import binarize_label

SUBDIRS = ("A", "B", "label")


class DatasetError(ValueError):
    pass


class TilingRemainderWarning(UserWarning):
    pass


@dataclass
class SamplePair:
    t1: np.ndarray      # (H, W, 3) uint8
    t2: np.ndarray      # (H, W, 3) uint8
    label: np.ndarray   # (H, W) uint8 in {0, 1}
    name: str = ""

    def __post_init__(self):
        if self.t1.ndim != 3 or self.t1.shape[2] != 3 or self.t2.shape != self.t1.shape:
            raise DatasetError(f"{self.name}: images must be matching (H, W, 3), got "
                               f"{self.t1.shape} and {self.t2.shape}")
        if self.label.shape != self.t1.shape[:2]:
            raise DatasetError(f"{self.name}: label {self.label.shape} does not match "
                               f"image {self.t1.shape[:2]}")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.t1.shape[:2]


# -- disk I/O ------------------------------------------------------------------

def _read_rgb(path: str, name: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P"):
            raise DatasetError(f"{name}: unsupported image mode {im.mode}")
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _read_label(path: str, name: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P", "I", "I;16"):
            raise DatasetError(f"{name}: label must be single-channel, got mode {im.mode}")
        arr = np.asarray(im.convert("L") if im.mode == "1" else im)
    if arr.ndim != 2:
        raise DatasetError(f"{name}: label must be single-channel")
    return binarize_label(arr)


def load_dataset(root, split: str) -> List[SamplePair]:
    """All pairs of ``root/split`` sorted by file name."""
    base = os.path.join(os.fspath(root), split)
    listings = {}
    for sub in SUBDIRS:
        d = os.path.join(base, sub)
        if not os.path.isdir(d):
            raise DatasetError(f"missing directory {d}")
        listings[sub] = {f for f in os.listdir(d) if f.lower().endswith(".png")}
    names = set().union(*listings.values())
    for sub in SUBDIRS:
        missing = sorted(names - listings[sub])
        if missing:
            raise DatasetError(f"{missing[0]} has no counterpart in {os.path.join(base, sub)}")
    pairs = []
    for fname in sorted(names):
        t1 = _read_rgb(os.path.join(base, "A", fname), fname)
        t2 = _read_rgb(os.path.join(base, "B", fname), fname)
        label = _read_label(os.path.join(base, "label", fname), fname)
        if t1.shape != t2.shape or label.shape != t1.shape[:2]:
            raise DatasetError(f"{fname}: size mismatch within pair "
                               f"(A {t1.shape[:2]}, B {t2.shape[:2]}, label {label.shape})")
        pairs.append(SamplePair(t1, t2, label, os.path.splitext(fname)[0]))
    return pairs


def save_pair(root, split: str, pair: SamplePair) -> None:
    base = os.path.join(os.fspath(root), split)
    for sub in SUBDIRS:
        os.makedirs(os.path.join(base, sub), exist_ok=True)
    fname = pair.name + ".png"
    Image.fromarray(pair.t1, "RGB").save(os.path.join(base, "A", fname))
    Image.fromarray(pair.t2, "RGB").save(os.path.join(base, "B", fname))
    Image.fromarray((pair.label * 255).astype(np.uint8), "L").save(os.path.join(base, "label", fname))


def stack_pairs(pairs: Sequence[SamplePair]):
    """(t1, t2, label) arrays: two (N, H, W, 3) uint8 stacks and (N, 1, H, W) float32."""
    t1 = np.stack([p.t1 for p in pairs])
    t2 = np.stack([p.t2 for p in pairs])
    y = np.stack([p.label for p in pairs])[:, None].astype(np.float32)
    return t1, t2, y


# -- tiling --------------------------------------------------------------------

def _starts(size: int, tile: int, step: int) -> List[int]:
    return list(range(0, size - tile + 1, step))


def tile(pair: SamplePair, tile_hw, overlap: int = 0) -> List[SamplePair]:
    """Cut a pair into aligned tiles, row-major.

    Pixels that do not fit a whole tile are dropped; a
    ``TilingRemainderWarning`` reports how many.
    """
    th, tw = (tile_hw, tile_hw) if np.isscalar(tile_hw) else tuple(tile_hw)
    H, W = pair.hw
    if th > H or tw > W:
        raise DatasetError(f"tile {th}x{tw} is larger than image {H}x{W}")
    if not 0 <= overlap < min(th, tw):
        raise DatasetError(f"overlap must lie in [0, {min(th, tw)})")
    rows = _starts(H, th, th - overlap)
    cols = _starts(W, tw, tw - overlap)
    covered_h = rows[-1] + th
    covered_w = cols[-1] + tw
    dropped = H * W - covered_h * covered_w
    if dropped:
        warnings.warn(f"{pair.name}: {dropped} pixels outside the tile grid were dropped",
                      TilingRemainderWarning, stacklevel=2)
    out = []
    for r in rows:
        for c in cols:
            sl = (slice(r, r + th), slice(c, c + tw))
            out.append(SamplePair(pair.t1[sl].copy(), pair.t2[sl].copy(), pair.label[sl].copy(),
                                  f"{pair.name}_{r}_{c}"))
    return out


# -- augmentation ----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    gaussian: bool = True
    sigma_range: Tuple[float, float] = (0.02, 0.02)   # intensity units in [0, 1]
    salt_pepper: bool = True
    salt_pepper_p: float = 0.01
    crop: bool = False
    crop_size: Optional[int] = None
    rotate: bool = True
    rotation_prob: float = 0.5
    rotation_angles: Tuple[int, ...] = (90, 180, 270)
    arbitrary_rotation: bool = False                  # any angle in [0, 360) instead of the set
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid sigma range {self.sigma_range}")
        for name in ("salt_pepper_p", "rotation_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.crop and (self.crop_size is None or self.crop_size <= 0):
            raise ValueError("crop enabled without a positive crop_size")
        if not self.arbitrary_rotation and any(a % 90 for a in self.rotation_angles):
            raise ValueError("rotation angles must be multiples of 90 unless arbitrary_rotation")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(gaussian=False, salt_pepper=False, crop=False, rotate=False, **kw)

    def validate_for(self, hw) -> None:
        if self.crop and self.crop_size > min(hw):
            raise ValueError(f"crop size {self.crop_size} exceeds image {hw}")


def gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = img.astype(np.float64) / 255.0 + rng.normal(0.0, sigma, img.shape)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def salt_and_pepper(img: np.ndarray, p: float, rng: np.random.Generator):
    """Returns (noisy image, boolean mask of corrupted pixels)."""
    hit = rng.random(img.shape[:2]) < p
    salt = rng.random(img.shape[:2]) < 0.5
    out = img.copy()
    out[hit & salt] = 255
    out[hit & ~salt] = 0
    return out, hit


def _rotate_any(arr: np.ndarray, angle: float, nearest: bool) -> np.ndarray:
    resample = Image.NEAREST if nearest else Image.BILINEAR
    return np.asarray(Image.fromarray(arr).rotate(angle, resample=resample))


def augment(pair: SamplePair, cfg: AugmentConfig, rng: Optional[np.random.Generator] = None) -> SamplePair:
    """Geometric transforms hit t1, t2 and label identically; noise only the images."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    cfg.validate_for(pair.hw)
    t1, t2, y = pair.t1, pair.t2, pair.label
    if cfg.crop:
        H, W = pair.hw
        s = cfg.crop_size
        r = int(rng.integers(0, H - s + 1))
        c = int(rng.integers(0, W - s + 1))
        t1, t2, y = t1[r:r + s, c:c + s], t2[r:r + s, c:c + s], y[r:r + s, c:c + s]
    if cfg.rotate and rng.random() < cfg.rotation_prob:
        if cfg.arbitrary_rotation:
            angle = float(rng.uniform(0.0, 360.0))
            t1, t2 = _rotate_any(t1, angle, False), _rotate_any(t2, angle, False)
            y = _rotate_any(y, angle, True)
        else:
            k = int(cfg.rotation_angles[rng.integers(len(cfg.rotation_angles))]) // 90
            t1, t2, y = np.rot90(t1, k), np.rot90(t2, k), np.rot90(y, k)
    if cfg.gaussian:
        lo, hi = cfg.sigma_range
        t1 = gaussian_noise(t1, float(rng.uniform(lo, hi)), rng)
        t2 = gaussian_noise(t2, float(rng.uniform(lo, hi)), rng)
    if cfg.salt_pepper:
        t1, _ = salt_and_pepper(t1, cfg.salt_pepper_p, rng)
        t2, _ = salt_and_pepper(t2, cfg.salt_pepper_p, rng)
    c = np.ascontiguousarray
    return SamplePair(c(t1), c(t2), c(y), pair.name)


# -- synthetic scenes ------------------------------------------------------------

@dataclass
class _Shape:
    kind: str          # "rect" or "ellipse"
    r0: int
    c0: int
    h: int
    w: int
    color: np.ndarray

    def mask(self, H: int, W: int) -> np.ndarray:
        m = np.zeros((H, W), dtype=bool)
        if self.kind == "rect":
            m[self.r0:self.r0 + self.h, self.c0:self.c0 + self.w] = True
        else:
            rr, cc = np.ogrid[:H, :W]
            cy, cx = self.r0 + (self.h - 1) / 2, self.c0 + (self.w - 1) / 2
            m = ((rr - cy) / (self.h / 2)) ** 2 + ((cc - cx) / (self.w / 2)) ** 2 <= 1.0
        return m


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Smooth colored field plus fine grain, float in [0, 255]."""
    coarse = rng.uniform(60, 170, size=(max(H // 16, 2), max(W // 16, 2), 3))
    img = np.asarray(Image.fromarray(coarse.astype(np.uint8), "RGB").resize((W, H), Image.BILINEAR),
                     dtype=np.float64)
    return img + rng.normal(0, 6, size=(H, W, 3))


def _place(rng, H, W, occupied, lo, hi, tries=60) -> Optional[_Shape]:
    for _ in range(tries):
        h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        r0 = int(rng.integers(0, H - h + 1))
        c0 = int(rng.integers(0, W - w + 1))
        kind = "rect" if rng.random() < 0.6 else "ellipse"
        color = rng.uniform(0, 255, size=3)
        s = _Shape(kind, r0, c0, h, w, color)
        m = s.mask(H, W)
        # one pixel of clearance keeps shapes from touching
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        if not (grown & occupied).any():
            return s
    return None


def synthesize_pair(rng: np.random.Generator, hw, change_density: float, name: str = "") -> SamplePair:
    """One scene: a shared textured background with static shapes, plus shapes
    that appear (added in T2) or vanish (present only in T1)."""
    H, W = hw
    lo, hi = max(3, min(H, W) // 10), max(4, min(H, W) // 4)
    occupied = np.zeros((H, W), dtype=bool)
    static, t1_only, t2_only = [], [], []
    for _ in range(int(rng.integers(1, 4))):
        s = _place(rng, H, W, occupied, lo, hi)
        if s is not None:
            occupied |= s.mask(H, W)
            static.append(s)
    target = change_density * H * W * rng.uniform(0.8, 1.2)
    changed_area = 0
    while changed_area < target:
        s = _place(rng, H, W, occupied, lo, hi)
        if s is None:
            break
        m = s.mask(H, W)
        area = int(m.sum())
        # stop at whichever side of the target lies closer
        if changed_area > 0 and changed_area + area - target > target - changed_area:
            break
        occupied |= m
        changed_area += area
        (t2_only if rng.random() < 0.6 else t1_only).append(s)

    bg = _background(rng, H, W)
    gain = rng.uniform(0.9, 1.1, size=3)

    def render(shapes, illum):
        img = bg.copy()
        struct = np.zeros((H, W), dtype=bool)
        for s in shapes:
            m = s.mask(H, W)
            img[m] = s.color + rng.normal(0, 4, size=(int(m.sum()), 3))
            struct |= m
        return np.clip(np.rint(img * illum), 0, 255).astype(np.uint8), struct

    t1, s1 = render(static + t1_only, 1.0)
    t2, s2 = render(static + t2_only, gain)
    return SamplePair(t1, t2, (s1 ^ s2).astype(np.uint8), name)


def generate_synthetic(root, n_pairs: int, hw=(64, 64), change_density: float = 0.1,
                       seed: int = 0, split: str = "train") -> List[str]:
    """Write ``n_pairs`` synthetic pairs under ``root/split``; returns their names.

    Pair ``i`` depends only on (seed, split, i), so splits never share scenes.
    """
    if not 0.0 < change_density <= 0.5:
        raise ValueError(f"change density must lie in (0, 0.5], got {change_density}")
    hw = (hw, hw) if np.isscalar(hw) else tuple(hw)
    root = os.fspath(root)
    try:
        os.makedirs(os.path.join(root, split), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write synthetic data to {root}: {exc}") from exc
    split_key = int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little")
    width = max(4, len(str(n_pairs - 1)))
    names = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, split_key, i])
        name = f"{i:0{width}d}"
        save_pair(root, split, synthesize_pair(rng, hw, change_density, name))
        names.append(name)
    return names
