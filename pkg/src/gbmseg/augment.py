"""Seeded, mask-consistent augmentations: rotation, scaling, flipping, shearing, noise, contrast.

Geometric ops resample the image bilinearly and the mask by nearest neighbour,
filling out-of-frame pixels with 0. Coordinates are (row, col) with rows
pointing down; positive rotation angles turn the picture clockwise.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .dataset import ImageSample
from .errors import ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_deg: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip_horizontal_prob: float = 0.5
    shear_max_deg: float = 10.0
    noise_sigma: float = 0.02
    contrast_range: tuple[float, float] = (0.8, 1.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "contrast_range", tuple(float(v) for v in self.contrast_range))
        for name in ("scale_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} must satisfy min <= max, got {(lo, hi)}")
            if lo <= 0:
                raise ValidationError(f"{name} values must be > 0")
        if not 0.0 <= self.flip_horizontal_prob <= 1.0:
            raise ValidationError("flip_horizontal_prob must lie in [0, 1]")
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise ValidationError("rotation_max_deg must lie in [0, 180]")
        if not 0.0 <= self.shear_max_deg < 45.0:
            raise ValidationError("shear_max_deg must lie in [0, 45)")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        return cls(rotation_max_deg=0.0, scale_range=(1.0, 1.0), flip_horizontal_prob=0.0,
                   shear_max_deg=0.0, noise_sigma=0.0, contrast_range=(1.0, 1.0), seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["contrast_range"] = list(self.contrast_range)
        return d


def _warp(image: np.ndarray, inverse, order: int) -> np.ndarray:
    """Resample `image` at inverse(out_dr, out_dc) offsets about the centre; 0 outside."""
    h, w = image.shape[:2]
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc_ = np.meshgrid(np.arange(h) - cr, np.arange(w) - cc, indexing="ij")
    sr, sc = inverse(rr, cc_)
    sr = sr + cr
    sc = sc + cc
    if order == 0:
        ir = np.floor(sr + 0.5).astype(np.int64)
        ic = np.floor(sc + 0.5).astype(np.int64)
        inside = (ir >= 0) & (ir < h) & (ic >= 0) & (ic < w)
        out = np.zeros_like(image)
        out[inside] = image[ir[inside], ic[inside]]
        return out

    img = np.asarray(image, dtype=np.float64)
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros_like(img)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            r = r0 + dr
            c = c0 + dc
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            out[ok] += (wr * wc)[ok] * img[r[ok], c[ok]]
    return out


def _apply_geometric(image, mask, inverse):
    out = _warp(image, inverse, order=1)
    return out, (None if mask is None else _warp(mask, inverse, order=0))


def rotate(image: np.ndarray, mask: np.ndarray | None = None, degrees: float = 0.0):
    if abs(degrees) > 180:
        raise ValidationError(f"rotation must satisfy |degrees| <= 180, got {degrees}")
    image = np.asarray(image)
    if degrees % 90 == 0 and (degrees % 180 == 0 or image.shape[0] == image.shape[1]):
        # exact permutation at right angles; np.rot90 turns counter-clockwise for k > 0
        k = -int(degrees // 90)
        rot = lambda a: None if a is None else np.rot90(a, k).copy()
        return rot(image), rot(mask)
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)
    return _apply_geometric(image, mask, lambda r, c: (r * cos - c * sin, r * sin + c * cos))


def scale(image: np.ndarray, mask: np.ndarray | None = None, factor: float = 1.0):
    if factor <= 0:
        raise ValidationError(f"scale factor must be > 0, got {factor}")
    image = np.asarray(image)
    if factor == 1.0:
        return image.copy(), None if mask is None else np.array(mask)
    return _apply_geometric(image, mask, lambda r, c: (r / factor, c / factor))


def flip_horizontal(image: np.ndarray, mask: np.ndarray | None = None):
    image = np.asarray(image)
    return image[:, ::-1].copy(), None if mask is None else np.asarray(mask)[:, ::-1].copy()


def shear(image: np.ndarray, mask: np.ndarray | None = None, degrees: float = 0.0):
    """Horizontal shear: rows below the centre move right for positive angles."""
    if abs(degrees) >= 45:
        raise ValidationError(f"shear must satisfy |degrees| < 45, got {degrees}")
    image = np.asarray(image)
    if degrees == 0:
        return image.copy(), None if mask is None else np.array(mask)
    k = math.tan(math.radians(degrees))
    return _apply_geometric(image, mask, lambda r, c: (r, c - k * r))


def add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValidationError("noise sigma must be >= 0")
    image = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return image.copy()
    return np.clip(image + rng.normal(0.0, sigma, size=image.shape), 0.0, 1.0)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor <= 0:
        raise ValidationError(f"contrast factor must be > 0, got {factor}")
    image = np.asarray(image, dtype=np.float64)
    if factor == 1.0 or image.size == 0 or image.min() == image.max():
        # flat images have no deviation to stretch; skip the lossy mean round trip
        return image.copy()
    mean = image.mean()
    return np.clip(mean + factor * (image - mean), 0.0, 1.0)


def _uniform(rng, lo, hi):
    return lo if lo == hi else float(rng.uniform(lo, hi))


def sample_and_apply(sample: ImageSample, config: AugmentConfig, rng: np.random.Generator | None = None) -> ImageSample:
    """Draw one parameter set from `config` and apply it; the label is never touched."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    angle = _uniform(rng, -config.rotation_max_deg, config.rotation_max_deg)
    factor = _uniform(rng, *config.scale_range)
    flip = config.flip_horizontal_prob > 0 and rng.random() < config.flip_horizontal_prob
    shear_deg = _uniform(rng, -config.shear_max_deg, config.shear_max_deg)
    contrast = _uniform(rng, *config.contrast_range)

    img, mask = sample.pixels, sample.mask
    img, mask = rotate(img, mask, angle)
    img, mask = scale(img, mask, factor)
    img, mask = shear(img, mask, shear_deg)
    if flip:
        img, mask = flip_horizontal(img, mask)
    img = adjust_contrast(img, contrast)
    img = add_noise(img, config.noise_sigma, rng)
    return replace(sample, pixels=img, mask=mask)
