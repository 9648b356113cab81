"""Full CLI pipeline on a generated dataset: ingest, preprocess, train, evaluate, segment, report."""

import argparse
import json
import time
from pathlib import Path

from gbmseg.cli import run_command
from gbmseg.synthetic import write_dataset_tree

CONFIG = {
    "preprocess": {"target_side": 32},
    "model": {"base_channels": 8, "depth": 2},
    "train": {"epochs": 5, "batch_size": 8, "learning_rate": 0.003},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("work", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--arch", choices=["unet", "deeplabv3"], default="unet")
    p.add_argument("--epochs", type=int, default=5)
    args = p.parse_args()

    work = args.work
    data = write_dataset_tree(work / "data", 12, 12, side=48, seed=args.seed, masks=True)
    cfg = work / "config.json"
    cfg.write_text(json.dumps(CONFIG, indent=2))
    out = work / "out"
    steps = [
        ["ingest", "--data-dir", data, "--out", out / "manifest.json", "--seed", args.seed],
        ["preprocess", "--manifest", out / "manifest.json", "--out", out / "prep", "--config", cfg],
        ["train", "--arch", args.arch, "--task", "classify", "--config", cfg, "--manifest",
         out / "prep" / "manifest.json", "--out", out / "train", "--seed", args.seed, "--epochs", args.epochs],
        ["evaluate", "--checkpoint", out / "train" / "model.ckpt", "--manifest", out / "prep" / "manifest.json",
         "--out", out / "report.json"],
        ["segment", "--image", out / "prep" / "images" / "yes" / "yes_0000.png", "--skip-preprocess",
         "--side", "32", "--k", "3", "--min-area", "5", "--mask", out / "seg" / "mask.png",
         "--overlay", out / "seg" / "overlay.png"],
        ["report", "--metrics", out / "report.json", "--history", out / "train" / "history.csv",
         "--out", out / "summary"],
    ]
    start = time.perf_counter()
    for argv in steps:
        argv = [str(a) for a in argv]
        print(f"$ gbmseg {' '.join(argv)}")
        code = run_command(argv)
        if code:
            raise SystemExit(code)
    print(f"done in {time.perf_counter() - start:.1f}s; outputs under {out}")


if __name__ == "__main__":
    main()
