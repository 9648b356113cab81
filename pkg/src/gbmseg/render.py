"""Mask overlays and training-curve plots."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

OVERLAY_ALPHA = 0.4
# index = class id; background (0) is never painted
PALETTE = (
    (0, 0, 0),
    (255, 0, 0),      # tumor
    (255, 255, 0),    # edema
    (0, 255, 0),      # healthy tissue
    (0, 128, 255),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
)


def _gray_uint8(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValidationError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(img.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def render_overlay(image, mask, class_colors=None, alpha: float = OVERLAY_ALPHA, background: int = 0) -> np.ndarray:
    """Grayscale image promoted to RGB with every non-background class tinted at `alpha`."""
    gray = _gray_uint8(image)
    mask = np.asarray(mask)
    if mask.shape != gray.shape:
        raise ValidationError(f"mask shape {mask.shape} does not match image shape {gray.shape}")
    colors = PALETTE if class_colors is None else class_colors
    base = np.repeat(gray[..., None], 3, axis=2).astype(np.float64)
    out = base.copy()
    for cls in np.unique(mask):
        if cls == background:
            continue
        color = np.asarray(colors[int(cls) % len(colors)], dtype=np.float64)
        if int(cls) % len(colors) == 0 and class_colors is None:
            color = np.asarray(PALETTE[1], dtype=np.float64)
        sel = mask == cls
        out[sel] = (1 - alpha) * base[sel] + alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass
class PlotSummary:
    path: Path
    epochs: list
    accuracy_ylim: tuple
    loss_ylim: tuple


def render_history_plot(history_csv, out_path) -> PlotSummary:
    """Accuracy and loss against epoch, train and validation, written as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import TrainHistory

    hist = TrainHistory.read_csv(history_csv)
    epochs = [r.epoch for r in hist.records]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValidationError(f"{history_csv}: epochs are not strictly increasing")

    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    marker = "o" if len(epochs) == 1 else None
    for ax, key, title in ((ax_acc, "acc", "Model Accuracy"), (ax_loss, "loss", "Model Loss")):
        train = hist.column(f"train_{key}")
        val = hist.column(f"val_{key}")
        ax.plot(epochs, train, marker=marker, label="train")
        if any(v is not None for v in val):
            ax.plot(epochs, [np.nan if v is None else v for v in val], marker=marker, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy" if key == "acc" else "loss")
        ax.set_title(title)
        ax.legend()
    accs = [v for v in hist.column("train_acc") + hist.column("val_acc") if v is not None]
    lo = min(accs)
    ax_acc.set_ylim(max(0.0, lo - 0.05) if lo < 1.0 else 0.9, max(accs))
    if len(epochs) == 1:
        ax_acc.set_xlim(epochs[0] - 1, epochs[0] + 1)
        ax_loss.set_xlim(epochs[0] - 1, epochs[0] + 1)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    summary = PlotSummary(out_path, epochs, ax_acc.get_ylim(), ax_loss.get_ylim())
    plt.close(fig)
    return summary


def save_png(array: np.ndarray, path) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValidationError(f"values out of 8-bit range for {path}")
        arr = arr.astype(np.uint8)
    Image.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)
    return path
