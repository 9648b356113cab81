"""Confusion-matrix metrics, mask overlap scores and model evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, UndefinedMetricError, ValidationError

TUMOR_CLASS = 1


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValidationError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def as_grid(self) -> str:
        """Rows are the true class, columns the predicted class."""
        w = max(len(str(v)) for v in (self.tp, self.tn, self.fp, self.fn, "Pred 1"))
        lines = [
            f"{'':8}{'Pred 0':>{w}}  {'Pred 1':>{w}}",
            f"{'True 0':8}{self.tn:>{w}}  {self.fp:>{w}}",
            f"{'True 1':8}{self.fn:>{w}}  {self.tp:>{w}}",
        ]
        return "\n".join(lines)


def confusion_matrix(probabilities, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Predict 1 iff probability >= threshold and tally against binary labels."""
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.shape != y.shape:
        raise ValidationError(f"length mismatch: {p.size} probabilities vs {y.size} labels")
    if p.size == 0:
        raise ValidationError("need at least one prediction")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    pred = p >= threshold
    truth = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise UndefinedMetricError("accuracy", "no samples (TP + TN + FP + FN = 0)")
    return (cm.tn + cm.tp) / cm.total


def precision(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision", "no positive predictions (TP + FP = 0)")
    return cm.tp / (cm.tp + cm.fp)


def sensitivity(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("sensitivity", "no positive samples (TP + FN = 0)")
    return cm.tp / (cm.tp + cm.fn)


recall = sensitivity


def f1(cm: ConfusionMatrix) -> float:
    denom = 2 * cm.tp + cm.fp + cm.fn
    if denom == 0:
        raise UndefinedMetricError("f1", "no positives predicted or present (2TP + FP + FN = 0)")
    return 2 * cm.tp / denom


def _class_sets(pred_mask, true_mask, class_id):
    a = np.asarray(pred_mask)
    b = np.asarray(true_mask)
    if a.shape != b.shape:
        raise ValidationError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    return a == class_id, b == class_id


def dice(pred_mask, true_mask, class_id: int = TUMOR_CLASS) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when the class is absent from both masks."""
    a, b = _class_sets(pred_mask, true_mask, class_id)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def iou(pred_mask, true_mask, class_id: int = TUMOR_CLASS) -> float:
    a, b = _class_sets(pred_mask, true_mask, class_id)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def _safe(fn, cm, undefined):
    try:
        return fn(cm)
    except UndefinedMetricError as exc:
        undefined[exc.metric] = exc.reason
        return None


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    threshold: float = 0.5
    accuracy: float | None = None
    precision: float | None = None
    sensitivity: float | None = None
    f1: float | None = None
    dice: float | None = None
    iou: float | None = None
    per_class: dict | None = None
    undefined: dict = field(default_factory=dict)
    task: str = "classify"
    split: str | None = None
    n_samples: int | None = None
    checkpoint_id: str | None = None
    manifest_hash: str | None = None
    notes: list = field(default_factory=list)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, threshold: float = 0.5, **kw) -> "MetricsReport":
        undefined = {}
        return cls(
            confusion=cm, threshold=threshold,
            accuracy=_safe(accuracy, cm, undefined),
            precision=_safe(precision, cm, undefined),
            sensitivity=_safe(sensitivity, cm, undefined),
            f1=_safe(f1, cm, undefined),
            undefined=undefined, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        from pathlib import Path

        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        return cls(**d)


def segmentation_report(pred_masks, true_masks, num_classes: int, **kw) -> MetricsReport:
    """Pooled per-class Dice/IoU plus tumor-vs-rest pixel confusion metrics."""
    pred = np.asarray(pred_masks)
    true = np.asarray(true_masks)
    if pred.shape != true.shape:
        raise ValidationError(f"mask shape mismatch: {pred.shape} vs {true.shape}")
    per_class = {}
    for c in range(num_classes):
        per_class[str(c)] = {"dice": dice(pred, true, c), "iou": iou(pred, true, c)}
    p = pred == TUMOR_CLASS
    t = true == TUMOR_CLASS
    cm = ConfusionMatrix(tp=int((p & t).sum()), tn=int((~p & ~t).sum()),
                         fp=int((p & ~t).sum()), fn=int((~p & t).sum()))
    rep = MetricsReport.from_confusion(cm, task="segment", per_class=per_class, **kw)
    rep.dice = per_class[str(TUMOR_CLASS)]["dice"] if num_classes > TUMOR_CLASS else None
    rep.iou = per_class[str(TUMOR_CLASS)]["iou"] if num_classes > TUMOR_CLASS else None
    return rep


def predict_arrays(model, images, batch_size: int = 16) -> np.ndarray:
    """Probabilities (N,) for classify, class-index masks (N, S, S) for segment."""
    import torch

    from .models import forward

    outs = []
    for i in range(0, len(images), batch_size):
        logits = forward(model, torch.as_tensor(images[i:i + batch_size]))
        if model.spec.task == "classify":
            outs.append(torch.sigmoid(logits)[:, 0].double().numpy())
        else:
            outs.append(logits.argmax(dim=1).numpy())
    return np.concatenate(outs, axis=0)


def evaluate_arrays(model, images, targets, threshold: float = 0.5, **kw) -> MetricsReport:
    if len(images) == 0:
        raise ConfigurationError("cannot evaluate on an empty set")
    out = predict_arrays(model, images)
    if model.spec.task == "classify":
        targets = np.asarray(targets).reshape(-1)
        return MetricsReport.from_confusion(confusion_matrix(out, targets, threshold), threshold,
                                            task="classify", n_samples=len(images), **kw)
    return segmentation_report(out, np.asarray(targets), model.spec.num_classes,
                               threshold=threshold, n_samples=len(images), **kw)


def evaluate_model(model, manifest, split: str = "test", threshold: float = 0.5, **kw) -> MetricsReport:
    """Inference over one manifest split (no augmentation)."""
    from .training import load_split_arrays

    if model.spec.task == "segment" and any(e.mask_path is None for e in manifest.split(split)):
        raise ConfigurationError("segmentation evaluation needs a mask_path for every entry")
    images, targets = load_split_arrays(manifest, split, model.spec.task, model.spec.input_side)
    return evaluate_arrays(model, images, targets, threshold, split=split, **kw)
