"""End-to-end CLI pipeline on a small synthetic dataset, shared by the CLI and acceptance tests."""

import json
from pathlib import Path

from gbmseg.cli import run_command
from gbmseg.synthetic import write_dataset_tree

SMOKE_CONFIG = {
    "preprocess": {"target_side": 32},
    "model": {"base_channels": 8, "depth": 2},
    "train": {"epochs": 5, "batch_size": 8, "learning_rate": 0.003},
}


def run_smoke(work: Path, seed: int = 0) -> dict:
    """Run ingest, preprocess, train, evaluate, segment and report; return the artifact paths."""
    work = Path(work)
    data = write_dataset_tree(work / "data", 12, 12, side=48, seed=seed, masks=True, rgb_every=5)
    cfg = work / "config.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG))
    out = work / "out"
    paths = {
        "manifest": out / "manifest.json",
        "prep_manifest": out / "prep" / "manifest.json",
        "checkpoint": out / "train" / "model.ckpt",
        "history": out / "train" / "history.csv",
        "report": out / "report.json",
        "seg_mask": out / "seg" / "mask.png",
        "overlay": out / "seg" / "overlay.png",
        "summary": out / "summary" / "confusion_matrix.txt",
        "plot": out / "summary" / "history.png",
    }
    steps = [
        ["ingest", "--data-dir", str(data), "--out", str(paths["manifest"]), "--seed", str(seed)],
        ["preprocess", "--manifest", str(paths["manifest"]), "--out", str(out / "prep"), "--config", str(cfg)],
        ["train", "--arch", "unet", "--task", "classify", "--config", str(cfg), "--manifest",
         str(paths["prep_manifest"]), "--out", str(out / "train"), "--seed", str(seed)],
        ["evaluate", "--checkpoint", str(paths["checkpoint"]), "--manifest", str(paths["prep_manifest"]),
         "--split", "test", "--out", str(paths["report"])],
        ["segment", "--method", "kmeans", "--image", str(out / "prep" / "images" / "yes" / "yes_0000.png"),
         "--skip-preprocess", "--side", "32", "--k", "3", "--min-area", "5", "--seed", str(seed),
         "--mask", str(paths["seg_mask"]), "--overlay", str(paths["overlay"])],
        ["report", "--metrics", str(paths["report"]), "--history", str(paths["history"]),
         "--out", str(out / "summary")],
    ]
    for argv in steps:
        code = run_command(argv)
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return paths
