"""Adam training and fine-tuning for the classification and segmentation heads."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, sample_and_apply
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .dataset import DatasetManifest, ImageSample, load_mask, load_sample
from .errors import ConfigurationError, PreconditionError, TrainingError, ValidationError
from .models import Net

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "phase")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    early_stop_patience: int | None = None
    checkpoint_dir: Path | None = None
    # stop as soon as a clean pass over the training set reaches this accuracy
    target_train_accuracy: float | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            object.__setattr__(self, "augment", AugmentConfig(**self.augment))
        if self.checkpoint_dir is not None:
            object.__setattr__(self, "checkpoint_dir", Path(self.checkpoint_dir))
        if not 0 < self.adam_beta1 < 1 or not 0 < self.adam_beta2 < 1:
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigurationError("adam_epsilon must be > 0")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["augment"] = None if self.augment is None else self.augment.to_dict()
        d["checkpoint_dir"] = None if self.checkpoint_dir is None else str(self.checkpoint_dir)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    train_acc: float
    val_acc: float | None
    phase: str = "train"


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            row = asdict(r)
            w.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float) else row[k])
                        for k in HISTORY_FIELDS])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainHistory":
        """Parse a history CSV; raises ValidationError naming the offending line."""
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValidationError(f"{path}: empty history file")
        header = [h.strip() for h in lines[0].split(",")]
        if tuple(header[:5]) != HISTORY_FIELDS[:5]:
            raise ValidationError(f"{path}: line 1: unexpected header {header}")
        records = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ValidationError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(cells)}")
            row = dict(zip(header, cells))
            try:
                opt = lambda v: float(v) if v != "" else None
                records.append(EpochRecord(epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                                           val_loss=opt(row["val_loss"]), train_acc=float(row["train_acc"]),
                                           val_acc=opt(row["val_acc"]), phase=row.get("phase", "train") or "train"))
            except ValueError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
        if not records:
            raise ValidationError(f"{path}: history has a header but no epochs")
        return cls(records)


def bce_loss(probabilities, targets) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1 - eps]."""
    p = torch.as_tensor(probabilities)
    y = torch.as_tensor(targets, dtype=p.dtype)
    if p.shape != y.shape:
        raise ValidationError(f"shape mismatch: probabilities {tuple(p.shape)} vs targets {tuple(y.shape)}")
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def bce_with_logits(logits, targets) -> torch.Tensor:
    # same quantity as bce_loss(sigmoid(z), y) away from the clamp, without saturating gradients
    y = torch.as_tensor(targets, dtype=logits.dtype)
    if logits.shape != y.shape:
        raise ValidationError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(y.shape)}")
    return -(y * F.logsigmoid(logits) + (1 - y) * F.logsigmoid(-logits)).mean()


def segmentation_loss(logits, masks) -> torch.Tensor:
    """Mean per-pixel multi-class cross-entropy."""
    return F.cross_entropy(logits, torch.as_tensor(masks, dtype=torch.long))


def task_loss(model: Net, logits, targets) -> torch.Tensor:
    if model.spec.task == "classify":
        return bce_with_logits(logits, targets)
    return segmentation_loss(logits, targets)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig, t: int):
    """One bias-corrected Adam update; returns (new_params, state). `state` is updated in place."""
    if t < 1:
        raise ValidationError(f"Adam step index must be >= 1, got {t}")
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_epsilon, config.learning_rate
    new = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = theta
            continue
        if g.shape != theta.shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(theta.shape)} for {name}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name, torch.zeros_like(theta))
        v = state.v.get(name, torch.zeros_like(theta))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new[name] = theta - lr * m_hat / (torch.sqrt(v_hat) + eps)
    state.t = t
    return new, state


def _to_tensor(images, model: Net) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(images)).to(dtype)


def _targets_tensor(targets, model: Net) -> torch.Tensor:
    if model.spec.task == "classify":
        return torch.as_tensor(np.asarray(targets, dtype=np.float64).reshape(-1, 1)).to(next(model.parameters()).dtype)
    return torch.as_tensor(np.asarray(targets, dtype=np.int64))


def _clean_pass(model: Net, images, targets, batch_size: int):
    """Loss and accuracy over a dataset in inference mode."""
    if len(images) == 0:
        return None, None
    model.eval()
    total_loss = 0.0
    correct = 0
    count = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = _to_tensor(images[i:i + batch_size], model)
            y = _targets_tensor(targets[i:i + batch_size], model)
            logits = model(x)
            total_loss += float(task_loss(model, logits, y)) * len(x)
            if model.spec.task == "classify":
                correct += int(((torch.sigmoid(logits) >= 0.5).to(y.dtype) == y).sum())
                count += len(x)
            else:
                correct += int((logits.argmax(1) == y).sum())
                count += y.numel()
    return total_loss / len(images), correct / count


def _augment_batch(images, targets, task, config: AugmentConfig, rng):
    xs, ys = [], []
    for img, tgt in zip(images, targets):
        mask = tgt if task == "segment" else None
        label = 1 if task == "segment" else int(np.asarray(tgt).reshape(-1)[0])
        out = sample_and_apply(ImageSample(pixels=np.asarray(img[0], dtype=np.float64), label=label, mask=mask),
                               config, rng)
        xs.append(out.pixels[None])
        ys.append(out.mask if task == "segment" else tgt)
    return np.stack(xs), np.stack(ys) if task == "segment" else np.asarray(ys)


def fit(model: Net, train_x, train_y, val_x=None, val_y=None, config: TrainConfig = TrainConfig(),
        history: TrainHistory | None = None, phase: str = "train"):
    """Mini-batch Adam on in-memory arrays.

    train_x is (N, 1, S, S) in [0, 1]; train_y is (N,) binary labels for the
    classify task or (N, S, S) class-index masks for the segment task.
    """
    history = TrainHistory() if history is None else history
    train_x = np.asarray(train_x)
    train_y = np.asarray(train_y)
    if len(train_x) == 0:
        raise ConfigurationError("training set is empty")
    if len(train_x) != len(train_y):
        raise ValidationError(f"{len(train_x)} images vs {len(train_y)} targets")
    has_val = val_x is not None and len(val_x) > 0
    if config.epochs == 0:
        return model, history

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    named = dict(model.named_parameters())
    best_val = math.inf
    stale = 0
    ckdir = config.checkpoint_dir
    for _ in range(config.epochs):
        model.train()
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            if config.augment is not None:
                xb, yb = _augment_batch(xb, yb, model.spec.task, config.augment, rng)
            x = _to_tensor(xb, model)
            y = _targets_tensor(yb, model)
            model.zero_grad(set_to_none=True)
            loss = task_loss(model, model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {model.trained_epochs + 1}")
            loss.backward()
            grads = {n: p.grad for n, p in named.items() if p.grad is not None}
            new, state = adam_step({n: p.detach() for n, p in named.items()}, grads, state, config, state.t + 1)
            with torch.no_grad():
                for n, p in named.items():
                    p.copy_(new[n])

        train_loss, train_acc = _clean_pass(model, train_x, train_y, config.batch_size)
        val_loss, val_acc = _clean_pass(model, val_x, val_y, config.batch_size) if has_val else (None, None)
        if not math.isfinite(train_loss) or (val_loss is not None and not math.isfinite(val_loss)):
            raise TrainingError(f"non-finite loss after epoch {model.trained_epochs + 1}")
        model.trained_epochs += 1
        history.records.append(EpochRecord(model.trained_epochs, train_loss, val_loss, train_acc, val_acc, phase))
        log.info("epoch %d %s loss %.5f acc %.4f val_loss %s", model.trained_epochs, phase, train_loss,
                 train_acc, val_loss)

        if ckdir is not None:
            save_checkpoint(model, ckdir / "last.ckpt")
        monitored = val_loss if val_loss is not None else train_loss
        if monitored < best_val:
            best_val = monitored
            stale = 0
            if ckdir is not None:
                save_checkpoint(model, ckdir / "best.ckpt")
        else:
            stale += 1
        if config.early_stop_patience is not None and has_val and stale >= config.early_stop_patience:
            log.info("early stop after %d epochs without validation improvement", stale)
            break
        if config.target_train_accuracy is not None and train_acc >= config.target_train_accuracy:
            break
    model.eval()
    return model, history


def load_split_arrays(manifest: DatasetManifest, split: str, task: str, side: int):
    """Load a preprocessed split as (N, 1, S, S) float32 images plus labels or masks."""
    entries = manifest.split(split)
    images, targets = [], []
    for e in entries:
        s = load_sample(e)
        if s.needs_grayscale or s.pixels.shape != (side, side):
            raise ValidationError(f"{e.id}: expected a preprocessed {side}x{side} grayscale image, "
                                  f"got shape {s.pixels.shape}")
        images.append((s.pixels.astype(np.float32) / 255.0)[None])
        if task == "segment":
            if s.mask is None:
                raise ConfigurationError(f"{e.id}: segmentation needs a mask_path")
            targets.append(s.mask)
        else:
            targets.append(s.label)
    if not entries:
        return np.zeros((0, 1, side, side), np.float32), np.zeros((0,) if task == "classify" else (0, side, side))
    return np.stack(images), np.asarray(targets)


def train(model: Net, manifest: DatasetManifest, config: TrainConfig, history: TrainHistory | None = None,
          phase: str = "train"):
    for split in ("train", "validation"):
        if not manifest.split(split):
            raise ConfigurationError(f"manifest has an empty {split!r} split")
    if config.epochs == 0:
        return model, TrainHistory() if history is None else history
    side = model.spec.input_side
    tx, ty = load_split_arrays(manifest, "train", model.spec.task, side)
    vx, vy = load_split_arrays(manifest, "validation", model.spec.task, side)
    return fit(model, tx, ty, vx, vy, config, history=history, phase=phase)


def _apply_delta(config: TrainConfig, delta: dict | None) -> TrainConfig:
    delta = dict(delta or {})
    if isinstance(delta.get("augment"), dict):
        base = config.augment.to_dict() if config.augment is not None else {}
        delta["augment"] = AugmentConfig(**{**base, **delta["augment"]})
    unknown = set(delta) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ConfigurationError(f"unknown fine-tune keys: {sorted(unknown)}")
    return replace(config, **delta)


def _require_trained(model) -> None:
    if not isinstance(model, Net) or getattr(model, "trained_epochs", 0) < 1:
        raise PreconditionError("fine_tune needs a trained model (train it or load a checkpoint first)")


def fine_tune(model: Net, manifest: DatasetManifest, config: TrainConfig, config_delta: dict | None = None,
              history: TrainHistory | None = None):
    """Continue from current weights with overridden hyperparameters and a fresh optimizer."""
    _require_trained(model)
    return train(model, manifest, _apply_delta(config, config_delta), history=history, phase="fine_tune")


def fine_tune_arrays(model: Net, train_x, train_y, val_x=None, val_y=None, config: TrainConfig = TrainConfig(),
                     config_delta: dict | None = None, history: TrainHistory | None = None):
    _require_trained(model)
    return fit(model, train_x, train_y, val_x, val_y, _apply_delta(config, config_delta),
               history=history, phase="fine_tune")
