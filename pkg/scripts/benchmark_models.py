"""Parameter counts and CPU forward time of the default UNet and DeepLabv3."""

import argparse
import time

import torch

from gbmseg.models import ModelSpec, build_model, forward, parameter_count


def best_time(model, x, repeats):
    forward(model, x)
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        forward(model, x)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--task", choices=["segment", "classify"], default="segment")
    args = p.parse_args()

    x = torch.rand(args.batch, 1, args.side, args.side)
    print(f"{'arch':10} {'params':>12} {'forward s':>10}")
    for arch in ("unet", "deeplabv3"):
        model = build_model(ModelSpec(arch=arch, task=args.task, input_side=args.side))
        print(f"{arch:10} {parameter_count(model):>12,} {best_time(model, x, args.repeats):>10.3f}")


if __name__ == "__main__":
    main()
