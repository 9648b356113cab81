"""Synthetic MRI-like fixtures used by the tests and the smoke experiment."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import MASK_DIR


def disk_mask(side: int, center, radius: float) -> np.ndarray:
    r, c = np.mgrid[0:side, 0:side]
    return ((r - center[0]) ** 2 + (c - center[1]) ** 2 <= radius ** 2).astype(np.int64)


def disk_image(side: int = 64, center=None, radius=None, fg: float = 0.9, bg: float = 0.1):
    """Bright disk on a dark field; returns (image, binary mask)."""
    center = ((side - 1) / 2, (side - 1) / 2) if center is None else center
    radius = side / 4 if radius is None else radius
    mask = disk_mask(side, center, radius)
    return np.where(mask == 1, fg, bg).astype(np.float64), mask


def blob_dataset(n_per_class: int = 8, side: int = 32, seed: int = 0):
    """Images (2n, 1, S, S) and labels (2n,): Gaussian blob (label 1) or blank field (label 0)."""
    rng = np.random.default_rng(seed)
    r, c = np.mgrid[0:side, 0:side]
    images, labels = [], []
    for label in (1, 0):
        for _ in range(n_per_class):
            img = 0.1 + 0.02 * rng.standard_normal((side, side))
            if label:
                cr, cc = rng.uniform(side * 0.3, side * 0.7, size=2)
                sigma = rng.uniform(side * 0.06, side * 0.12)
                img = img + 0.8 * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * sigma ** 2))
            images.append(np.clip(img, 0, 1)[None])
            labels.append(label)
    return np.stack(images).astype(np.float32), np.asarray(labels)


def disk_dataset(n: int = 8, side: int = 32, seed: int = 0):
    """Images (n, 1, S, S) with one bright disk each and masks (n, S, S) marking it as class 1."""
    rng = np.random.default_rng(seed)
    images, masks = [], []
    for _ in range(n):
        center = rng.uniform(side * 0.3, side * 0.7, size=2)
        radius = rng.uniform(side * 0.12, side * 0.22)
        img, mask = disk_image(side, center, radius, fg=0.85, bg=0.15)
        img = np.clip(img + 0.02 * rng.standard_normal(img.shape), 0, 1)
        images.append(img[None])
        masks.append(mask)
    return np.stack(images).astype(np.float32), np.stack(masks)


def write_dataset_tree(root, n_yes: int, n_no: int, side: int = 48, seed: int = 0, masks: bool = False,
                       rgb_every: int = 0) -> Path:
    """Write a yes/no folder tree of 8-bit PNGs; tumorous images get a bright disk.

    With masks=True a class-index mask is written under <root>/masks/yes/.
    rgb_every > 0 stores every k-th image as RGB to exercise grayscale conversion.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    for d in ("yes", "no"):
        (root / d).mkdir(parents=True, exist_ok=True)
    if masks:
        (root / MASK_DIR / "yes").mkdir(parents=True, exist_ok=True)
        (root / MASK_DIR / "no").mkdir(parents=True, exist_ok=True)
    k = 0
    for d, n in (("yes", n_yes), ("no", n_no)):
        for i in range(n):
            img = 0.2 + 0.03 * rng.standard_normal((side, side))
            mask = np.zeros((side, side), np.uint8)
            if d == "yes":
                center = rng.uniform(side * 0.3, side * 0.7, size=2)
                radius = rng.uniform(side * 0.12, side * 0.2)
                mask = disk_mask(side, center, radius).astype(np.uint8)
                img = np.where(mask == 1, 0.85, img)
            px = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
            name = f"{d}_{i:04d}.png"
            k += 1
            if rgb_every and k % rgb_every == 0:
                Image.fromarray(np.stack([px] * 3, axis=-1), mode="RGB").save(root / d / name)
            else:
                Image.fromarray(px, mode="L").save(root / d / name)
            if masks:
                Image.fromarray(mask, mode="L").save(root / MASK_DIR / d / name)
    return root
