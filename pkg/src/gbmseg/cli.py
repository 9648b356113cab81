"""Command-line entry point: ingest, preprocess, train, evaluate, segment, report.

Exit codes: 0 success, 1 validation/configuration error (including bad
usage), 2 I/O error, 3 training abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .classical_seg import extract_tumor_mask, kmeans_segment
from .dataset import DEFAULT_RATIOS, DatasetManifest, load_sample, scan_dataset, split_manifest
from .errors import CheckpointCorrupt, GBMError, TrainingError, ValidationError
from .evaluation import MetricsReport, evaluate_model, predict_arrays
from .models import ModelSpec, build_model
from .preprocess import PreprocessConfig, preprocess_image, preprocess_pipeline, resize, to_grayscale, to_uint8
from .render import render_history_plot, render_overlay, save_png
from .training import TrainConfig, fine_tune, train

log = logging.getLogger("gbmseg")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN = 0, 1, 2, 3


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    log_level: str = "INFO"
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict, **model_overrides) -> "RunConfig":
        """Build and validate every section before any work starts."""
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        pre = PreprocessConfig(**d.get("preprocess", {}))
        aug_d = d.get("augment", {})
        augment = None if aug_d is None else AugmentConfig(**aug_d)
        train_d = dict(d.get("train", {}))
        train_d["augment"] = augment
        tcfg = TrainConfig.from_dict(train_d)
        model_d = {**d.get("model", {}), **{k: v for k, v in model_overrides.items() if v is not None}}
        model_d.setdefault("input_side", pre.target_side)
        spec = ModelSpec.from_dict(model_d)
        level = d.get("log_level", "INFO")
        if not isinstance(logging.getLevelName(level), int):
            raise ValidationError(f"unknown log_level {level!r}")
        return cls(preprocess=pre, augment=augment, train=tcfg, model=spec, log_level=level,
                   output_dir=d.get("output_dir"))

    @classmethod
    def load(cls, path, **model_overrides) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, **model_overrides)
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON config ({exc})") from exc
        return cls.from_dict(data, **model_overrides)

    def to_dict(self) -> dict:
        return {
            "preprocess": asdict(self.preprocess),
            "augment": None if self.augment is None else self.augment.to_dict(),
            "train": self.train.to_dict(),
            "model": json.loads(self.model.to_json()),
            "log_level": self.log_level,
            "output_dir": self.output_dir,
        }


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_record(record_path: Path, command: str, argv, config: dict, seeds: dict, inputs, outputs) -> None:
    """Resolved config, seeds and artifact hashes written beside a command's outputs."""
    base = record_path.parent

    def rel(p):
        return os.path.relpath(Path(p).resolve(), base.resolve()).replace(os.sep, "/")

    import torch

    record = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "inputs": {rel(p): sha256_file(p) for p in inputs if Path(p).is_file()},
        "outputs": {rel(p): sha256_file(p) for p in outputs if Path(p).is_file()},
        "versions": {"gbmseg": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
    }
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _record_beside(out: Path) -> Path:
    return out / "run_record.json" if out.suffix == "" else out.with_name(out.stem + ".run.json")


def num_workers() -> int:
    raw = os.environ.get("GBM_NUM_WORKERS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"GBM_NUM_WORKERS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError("GBM_NUM_WORKERS must be >= 1")
    return n


# -- subcommands ---------------------------------------------------------------------------------

def cmd_ingest(args, argv) -> int:
    manifest = scan_dataset(args.data_dir)
    if len(manifest):
        manifest = split_manifest(manifest, tuple(args.ratios), args.seed)
    else:
        manifest = replace(manifest, split_ratios=tuple(args.ratios), seed=args.seed)
    out = Path(args.out)
    manifest.save(out)
    sizes = manifest.split_sizes()
    print(f"{len(manifest)} entries ({manifest.skipped} skipped) -> {out}  split sizes {sizes}")
    write_run_record(_record_beside(out), "ingest", argv,
                     {"data_dir": str(args.data_dir), "ratios": list(args.ratios)}, {"split": args.seed},
                     [], [out])
    return EXIT_OK


def cmd_preprocess(args, argv) -> int:
    cfg = RunConfig.load(args.config)
    pre = cfg.preprocess if args.side is None else replace(cfg.preprocess, target_side=args.side)
    if args.materialize < 0:
        raise ValidationError("--materialize must be >= 0")
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    img_dir = out / "images"

    def work(entry):
        sample = preprocess_pipeline(load_sample(entry), pre)
        rel = Path(entry.id).with_suffix(".png")
        img_path = save_png(to_uint8(sample.pixels), img_dir / rel)
        mask_path = None
        if sample.mask is not None:
            mask_path = save_png(sample.mask.astype(np.uint8), out / "masks" / rel)
        return replace(entry, path=img_path, mask_path=mask_path)

    with ThreadPoolExecutor(max_workers=num_workers()) as pool:
        entries = tuple(pool.map(work, manifest.entries))
    if args.materialize:
        entries = entries + _materialize(entries, cfg.augment or AugmentConfig(), args.materialize, img_dir, out)
    new = replace(manifest, root=img_dir, entries=entries)
    new_path = out / "manifest.json"
    new.save(new_path)
    print(f"preprocessed {len(entries)} images at {pre.target_side}x{pre.target_side} -> {out}")
    outputs = [new_path] + [e.path for e in entries] + [e.mask_path for e in entries if e.mask_path]
    write_run_record(out / "run_record.json", "preprocess", argv,
                     {"preprocess": asdict(pre), "materialize": args.materialize,
                      "augment": None if cfg.augment is None else cfg.augment.to_dict()},
                     {"augment": None if cfg.augment is None else cfg.augment.seed},
                     [args.manifest], outputs)
    return EXIT_OK


def _materialize(entries, config: AugmentConfig, copies: int, img_dir: Path, out: Path) -> tuple:
    """Write `copies` augmented variants of every train-split entry as extra train entries."""
    from .augment import sample_and_apply

    extra = []
    train = [e for e in entries if e.split == "train"]
    seeds = np.random.SeedSequence(config.seed).spawn(len(train))
    for entry, ss in zip(train, seeds):
        rng = np.random.default_rng(ss)
        base = load_sample(entry)
        base = replace(base, pixels=base.pixels / 255.0)
        rel = Path(entry.id).with_suffix("")
        for j in range(copies):
            aug = sample_and_apply(base, config, rng)
            name = f"{rel.as_posix()}_aug{j}.png"
            img_path = save_png(to_uint8(aug.pixels), img_dir / name)
            mask_path = None if aug.mask is None else save_png(aug.mask.astype(np.uint8), out / "masks" / name)
            extra.append(replace(entry, id=name, path=img_path, mask_path=mask_path))
    return tuple(extra)


def cmd_train(args, argv) -> int:
    cfg = RunConfig.load(args.config, arch=args.arch, task=args.task)
    out = Path(args.out)
    tcfg = replace(cfg.train, checkpoint_dir=out / "checkpoints")
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    manifest = DatasetManifest.load(args.manifest)
    if args.fine_tune:
        model = load_checkpoint(args.fine_tune, expected_spec=cfg.model)
        delta = json.loads(Path(args.delta).read_text()) if args.delta else {}
        model, history = fine_tune(model, manifest, tcfg, delta)
    else:
        model = build_model(cfg.model, seed=tcfg.seed)
        model, history = train(model, manifest, tcfg)
    ckpt = save_checkpoint(model, out / "model.ckpt")
    hist_path = out / "history.csv"
    history.save(hist_path)
    last = history.records[-1] if history.records else None
    print(f"trained {len(history)} epochs -> {ckpt}" + (f"  final train_acc {last.train_acc:.4f}" if last else ""))
    resolved = cfg.to_dict()
    resolved["train"] = tcfg.to_dict()
    write_run_record(out / "run_record.json", "train", argv, resolved,
                     {"train": tcfg.seed, "init": tcfg.seed,
                      "augment": None if tcfg.augment is None else tcfg.augment.seed},
                     [args.manifest] + ([args.config] if args.config else []), [ckpt, hist_path])
    return EXIT_OK


def cmd_evaluate(args, argv) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt, arch=args.arch)
    manifest = DatasetManifest.load(args.manifest)
    report = evaluate_model(model, manifest, args.split, args.threshold,
                            checkpoint_id=checkpoint_id(ckpt), manifest_hash=sha256_file(args.manifest))
    out = Path(args.out)
    report.save(out)
    print(report.confusion.as_grid())
    print(f"accuracy {report.accuracy}  precision {report.precision}  sensitivity {report.sensitivity}"
          f"  f1 {report.f1}")
    write_run_record(_record_beside(out), "evaluate", argv,
                     {"split": args.split, "threshold": args.threshold}, {}, [ckpt, args.manifest], [out])
    return EXIT_OK


def _load_gray(path) -> np.ndarray:
    from .dataset import SampleEntry

    pixels = load_sample(SampleEntry(id=Path(path).name, path=Path(path), label=0)).pixels
    return to_grayscale(pixels)


def cmd_segment(args, argv) -> int:
    raw = _load_gray(args.image)
    outputs = []
    if args.method == "kmeans":
        side = args.side or 256
        pre = PreprocessConfig(target_side=side)
        img = resize(raw, side) / 255.0 if args.skip_preprocess else preprocess_image(raw, pre)
        seg = kmeans_segment(img, k=args.k, seed=args.seed)
        # darkest cluster is left unpainted
        background = int(seg.max())
        tumor = extract_tumor_mask(seg, img, min_area=args.min_area)
    else:
        if not args.checkpoint:
            raise ValidationError("--method model needs --checkpoint")
        model = load_checkpoint(args.checkpoint)
        if model.spec.task != "segment":
            raise ValidationError("checkpoint holds a classification model; segmentation needs task=segment")
        side = model.spec.input_side
        pre = PreprocessConfig(target_side=side)
        img = resize(raw, side) / 255.0 if args.skip_preprocess else preprocess_image(raw, pre)
        seg = predict_arrays(model, img[None, None].astype(np.float32))[0]
        background = 0
        tumor = seg == 1
    if args.mask:
        outputs.append(save_png(seg.astype(np.uint8), args.mask))
    if args.overlay:
        outputs.append(save_png(render_overlay(img, seg, background=background), args.overlay))
    if args.tumor_mask:
        outputs.append(save_png((tumor * 255).astype(np.uint8), args.tumor_mask))
    counts = {int(c): int(n) for c, n in zip(*np.unique(seg, return_counts=True))}
    print(f"segmented {args.image}: class pixel counts {counts}; tumor pixels {int(tumor.sum())}")
    if outputs:
        write_run_record(_record_beside(Path(outputs[0])), "segment", argv,
                         {"method": args.method, "k": args.k, "side": side, "min_area": args.min_area},
                         {"kmeans": args.seed}, [args.image] + ([args.checkpoint] if args.checkpoint else []),
                         outputs)
    return EXIT_OK


def cmd_report(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if args.metrics:
        report = MetricsReport.from_dict(json.loads(Path(args.metrics).read_text()))
        text = [report.confusion.as_grid(), ""]
        for name in ("accuracy", "precision", "sensitivity", "f1", "dice", "iou"):
            v = getattr(report, name)
            reason = report.undefined.get(name)
            text.append(f"{name:12}" + (f"{v:.4f}" if v is not None else f"undefined ({reason})" if reason else "n/a"))
        path = out / "confusion_matrix.txt"
        path.write_text("\n".join(text) + "\n")
        outputs.append(path)
        print(path.read_text(), end="")
    if args.history:
        summary = render_history_plot(args.history, out / "history.png")
        outputs.append(summary.path)
        print(f"wrote {summary.path}")
    if not outputs:
        raise ValidationError("report needs --metrics and/or --history")
    write_run_record(out / "run_record.json", "report", argv, {}, {},
                     [p for p in (args.metrics, args.history) if p], outputs)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gbmseg", description="Glioblastoma MRI detection and segmentation pipeline")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="scan a yes/no dataset folder into a split manifest")
    s.add_argument("--data-dir", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratios", type=float, nargs=3, default=list(DEFAULT_RATIOS))
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="grayscale, resize, blur, sharpen and normalize a manifest")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--config", type=Path)
    s.add_argument("--side", type=int)
    s.add_argument("--materialize", type=int, default=0, metavar="K",
                   help="also write K augmented copies of each train image (default: augment online only)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train (or fine-tune) a UNet / DeepLabv3 model")
    s.add_argument("--arch", choices=["unet", "deeplabv3"])
    s.add_argument("--task", choices=["classify", "segment"])
    s.add_argument("--config", type=Path)
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--fine-tune", type=Path, metavar="CHECKPOINT", help="continue from this checkpoint")
    s.add_argument("--delta", type=Path, help="JSON of train-config overrides for --fine-tune")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics of a checkpoint on one manifest split")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--split", default="test", choices=["train", "validation", "test"])
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--arch", choices=["unet", "deeplabv3"], help="require this architecture")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("segment", help="segment one image with K-means or a trained model")
    s.add_argument("--method", choices=["kmeans", "model"], default="kmeans")
    s.add_argument("--image", required=True, type=Path)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--side", type=int)
    s.add_argument("--min-area", type=int, default=50)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--skip-preprocess", action="store_true", help="input is already preprocessed")
    s.add_argument("--overlay", type=Path)
    s.add_argument("--mask", type=Path)
    s.add_argument("--tumor-mask", type=Path)
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("report", help="confusion-matrix text and accuracy/loss curves")
    s.add_argument("--metrics", type=Path, help="report JSON from evaluate")
    s.add_argument("--history", type=Path, help="history CSV from train")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_report)
    return p


def run_command(argv) -> int:
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (CheckpointCorrupt, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GBMError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
