"""Write a yes/no folder tree of synthetic MRI-like slices (bright disk = tumorous)."""

import argparse

from gbmseg.synthetic import write_dataset_tree


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--yes", type=int, default=40)
    p.add_argument("--no", type=int, default=40)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--masks", action="store_true", help="also write class-index masks under <out>/masks")
    args = p.parse_args()
    root = write_dataset_tree(args.out, args.yes, args.no, side=args.side, seed=args.seed, masks=args.masks)
    print(f"wrote {args.yes} tumorous and {args.no} normal images under {root}")


if __name__ == "__main__":
    main()
