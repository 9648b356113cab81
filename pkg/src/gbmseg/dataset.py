"""Scan a yes/no image folder into a manifest, split it, and load samples."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigurationError, ValidationError

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
UNASSIGNED = "unassigned"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
LABEL_DIRS = {"yes": 1, "no": 0}
# optional ground-truth masks live under <root>/masks/<same relative path>
MASK_DIR = "masks"
DEFAULT_RATIOS = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class SampleEntry:
    id: str
    path: Path
    label: int
    split: str = UNASSIGNED
    mask_path: Path | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r} for {self.id}")
        if self.split not in SPLITS + (UNASSIGNED,):
            raise ValidationError(f"unknown split {self.split!r}")


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[SampleEntry, ...] = ()
    split_ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    skipped: int = field(default=0, compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("manifest ids must be unique")

    def __len__(self):
        return len(self.entries)

    def split(self, name: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def to_dict(self, relative_to: Path | None = None) -> dict:
        def fmt(p):
            if p is None:
                return None
            p = Path(p)
            if relative_to is not None:
                p = Path(os.path.relpath(p.resolve(), Path(relative_to).resolve()))
            return p.as_posix()

        entries = []
        for e in self.entries:
            d = {"id": e.id, "path": fmt(e.path), "label": e.label, "split": e.split}
            if e.mask_path is not None:
                d["mask_path"] = fmt(e.mask_path)
            entries.append(d)
        return {
            "root": fmt(self.root),
            "seed": self.seed,
            "split_ratios": list(self.split_ratios),
            "entries": entries,
        }

    def dumps(self, relative_to: Path | None = None) -> str:
        return json.dumps(self.to_dict(relative_to), indent=2) + "\n"

    def save(self, path) -> None:
        """Write JSON; paths are stored relative to the manifest's own directory."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(relative_to=path.parent))

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "DatasetManifest":
        def res(p):
            if p is None:
                return None
            p = Path(p)
            if base is not None and not p.is_absolute():
                p = Path(os.path.normpath(base / p))
            return p

        try:
            entries = tuple(
                SampleEntry(id=e["id"], path=res(e["path"]), label=int(e["label"]),
                            split=e.get("split", UNASSIGNED), mask_path=res(e.get("mask_path")))
                for e in d["entries"])
            return cls(root=res(d["root"]), entries=entries,
                       split_ratios=tuple(float(r) for r in d["split_ratios"]), seed=int(d["seed"]))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed manifest: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid manifest JSON ({exc})") from exc
        return cls.from_dict(data, base=path.parent)


@dataclass
class ImageSample:
    """Pixel grid (H, W) or (H, W, 3) with its label and optional class-index mask."""

    pixels: np.ndarray
    label: int
    mask: np.ndarray | None = None
    path: Path | None = None
    id: str | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def needs_grayscale(self) -> bool:
        return self.pixels.ndim == 3 and self.pixels.shape[2] != 1


def _is_readable_image(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError):
        return False


def scan_dataset(root) -> DatasetManifest:
    root = Path(root)
    for name in LABEL_DIRS:
        if not (root / name).is_dir():
            raise ConfigurationError(f"dataset root {root} is missing the {name!r} directory")
    entries = []
    skipped = 0
    for name, label in LABEL_DIRS.items():
        for path in sorted((root / name).rglob("*")):
            if not path.is_file() or path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            if not _is_readable_image(path):
                log.warning("skipping unreadable image %s", path)
                skipped += 1
                continue
            rel = path.relative_to(root).as_posix()
            mask = root / MASK_DIR / rel
            entries.append(SampleEntry(id=rel, path=path, label=label,
                                       mask_path=mask if mask.is_file() else None))
    entries.sort(key=lambda e: e.id)
    if skipped:
        log.warning("%d unreadable file(s) skipped under %s", skipped, root)
    return DatasetManifest(root=root, entries=tuple(entries), skipped=skipped)


def split_counts(n: int, ratios) -> list[int]:
    """Floor of ratio*n per split, remainder to the largest fractional parts (ties: earlier split)."""
    exact = [r * n for r in ratios]
    counts = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_manifest(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetManifest:
    """Stratified, seeded train/validation/test assignment.

    Each label class is shuffled on its own, the classes are interleaved by
    fractional rank so every contiguous run keeps the global label mix, and
    the interleaved order is cut into contiguous chunks.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigurationError(f"expected three non-negative split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    n = len(manifest.entries)
    if n == 0:
        raise ConfigurationError("cannot split an empty manifest")
    counts = split_counts(n, ratios)
    if n >= 10:
        for name, r, c in zip(SPLITS, ratios, counts):
            if r > 0 and c == 0:
                raise ConfigurationError(f"split {name!r} would receive 0 of {n} samples")

    rng = np.random.default_rng(seed)
    keyed = []
    for label in (0, 1):
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        perm = rng.permutation(len(idx))
        for rank, j in enumerate(perm):
            keyed.append(((rank + 0.5) / len(idx), label, idx[j]))
    keyed.sort()
    order = [i for _, _, i in keyed]

    assignment = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        for i in order[start:start + c]:
            assignment[i] = name
        start += c
    entries = tuple(replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries))
    return replace(manifest, entries=entries, split_ratios=ratios, seed=seed)


def _read_pixels(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("I;16", "I;16B", "I", "F"):
                raw = np.asarray(im, dtype=np.float64)
                top = raw.max() if raw.size and raw.max() > 0 else 1.0
                arr = np.round(raw / top * 255).astype(np.uint8)
            elif im.mode in ("LA", "1"):
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.array(arr)


def load_mask(path) -> np.ndarray:
    """Class-index mask stored as 8-bit PNG pixel values."""
    arr = _read_pixels(Path(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.int64)


def load_sample(entry: SampleEntry) -> ImageSample:
    pixels = _read_pixels(Path(entry.path))
    if pixels.size == 0 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
        raise ValidationError(f"zero-area image: {entry.path}")
    mask = load_mask(entry.mask_path) if entry.mask_path is not None else None
    return ImageSample(pixels=pixels, label=entry.label, mask=mask, path=Path(entry.path), id=entry.id)
