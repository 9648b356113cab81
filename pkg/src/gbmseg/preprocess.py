"""Grayscale, fixed-size resize, Gaussian denoising, high-pass sharpening, unit scaling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import ImageSample
from .errors import ValidationError

LUMA = np.array([0.299, 0.587, 0.114])
SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)
RAW_RANGE = (0.0, 255.0)
UNIT_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class PreprocessConfig:
    target_side: int = 256
    gaussian_kernel: int = 5
    gaussian_sigma: float = 1.0
    sharpen_enabled: bool = True
    normalize: bool = True

    def __post_init__(self):
        if self.gaussian_kernel < 3 or self.gaussian_kernel % 2 == 0:
            raise ValidationError(f"gaussian_kernel must be odd and >= 3, got {self.gaussian_kernel}")
        if self.gaussian_sigma <= 0:
            raise ValidationError("gaussian_sigma must be > 0")
        if self.target_side < 16:
            raise ValidationError(f"target_side must be >= 16, got {self.target_side}")


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma reduction of RGB; integer inputs are rounded half-to-even back to their dtype."""
    image = np.asarray(image)
    if image.ndim == 2:
        return image.copy()
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise ValidationError(f"expected 1 or 3 channels, got shape {image.shape}")
    if image.shape[2] == 1:
        return image[..., 0].copy()
    gray = image.astype(np.float64) @ LUMA
    if np.issubdtype(image.dtype, np.integer):
        info = np.iinfo(image.dtype)
        return np.clip(np.rint(gray), info.min, info.max).astype(image.dtype)
    return gray


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to side x side (float64 output)."""
    if side < 1:
        raise ValidationError(f"side must be >= 1, got {side}")
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValidationError("cannot resize an empty image")
    if img.shape[:2] == (side, side):
        return img.copy()
    r0, r1, wr = _bilinear_axis(img.shape[0], side)
    c0, c1, wc = _bilinear_axis(img.shape[1], side)
    wr = wr.reshape((side,) + (1,) * (img.ndim - 1))
    rows = img[r0] * (1 - wr) + img[r1] * wr
    wc = wc.reshape((1, side) + (1,) * (img.ndim - 2))
    return rows[:, c0] * (1 - wc) + rows[:, c1] * wc


def resize_nearest(mask: np.ndarray, side: int) -> np.ndarray:
    mask = np.asarray(mask)
    if side < 1:
        raise ValidationError(f"side must be >= 1, got {side}")
    rows = np.minimum(((np.arange(side) + 0.5) * mask.shape[0] / side).astype(np.int64), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * mask.shape[1] / side).astype(np.int64), mask.shape[1] - 1)
    return mask[np.ix_(rows, cols)].copy()


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    if size % 2 == 0 or size < 1:
        raise ValidationError(f"kernel size must be odd, got {size}")
    if sigma <= 0:
        raise ValidationError("sigma must be > 0")
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    # numpy "symmetric" repeats the edge sample (d c b a | a b c d)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for j, w in enumerate(k):
        out += w * np.take(padded, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(image: np.ndarray, kernel: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian blur with reflected borders."""
    k = gaussian_kernel1d(kernel, sigma)
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] <= kernel // 2 or img.shape[1] <= kernel // 2:
        raise ValidationError(f"image {img.shape} too small for a {kernel}-tap kernel")
    return _correlate_axis(_correlate_axis(img, k, 0), k, 1)


def correlate2d(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    kh, kw = kernel.shape
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="symmetric")
    out = np.zeros_like(img)
    h, w = img.shape
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j]:
                out += kernel[i, j] * padded[i:i + h, j:j + w]
    return out


def sharpen(image: np.ndarray, value_range=UNIT_RANGE, clamp: bool = True) -> np.ndarray:
    """Identity-plus-Laplacian high-pass, clamped to value_range."""
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValidationError("cannot sharpen an empty image")
    out = correlate2d(img, SHARPEN_KERNEL)
    if clamp:
        out = np.clip(out, *value_range)
    return out


def preprocess_image(pixels: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    img = to_grayscale(pixels).astype(np.float64)
    img = resize(img, config.target_side)
    img = gaussian_blur(img, config.gaussian_kernel, config.gaussian_sigma)
    if config.sharpen_enabled:
        img = sharpen(img, RAW_RANGE)
    if config.normalize:
        img = np.clip(img / RAW_RANGE[1], 0.0, 1.0)
    return img


def preprocess_pipeline(sample: ImageSample, config: PreprocessConfig = PreprocessConfig()) -> ImageSample:
    mask = None if sample.mask is None else resize_nearest(sample.mask, config.target_side)
    return replace(sample, pixels=preprocess_image(sample.pixels, config), mask=mask)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Unit-interval grid to 8-bit (x255, rounded)."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
