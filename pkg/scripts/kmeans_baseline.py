"""Autoencoder features + K-means on one image; prints Dice when a reference mask is given."""

import argparse

import numpy as np
from PIL import Image

from gbmseg.classical_seg import AutoencoderSpec, extract_tumor_mask, kmeans_segment, train_autoencoder
from gbmseg.evaluation import dice
from gbmseg.preprocess import PreprocessConfig, preprocess_image
from gbmseg.render import render_overlay, save_png
from gbmseg.synthetic import disk_image
from gbmseg.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--image", help="input image; a synthetic disk is used when omitted")
    p.add_argument("--reference", help="binary reference mask PNG")
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--ae-epochs", type=int, default=0, help="train an autoencoder for latent features")
    p.add_argument("--overlay", default="kmeans_overlay.png")
    args = p.parse_args()

    if args.image:
        img = preprocess_image(np.asarray(Image.open(args.image)), PreprocessConfig(target_side=args.side))
        ref = None
        if args.reference:
            ref = (preprocess_image(np.asarray(Image.open(args.reference).convert("L")),
                                    PreprocessConfig(target_side=args.side, sharpen_enabled=False)) > 0.5)
    else:
        img, ref = disk_image(args.side)

    encoder = None
    if args.ae_epochs:
        encoder = train_autoencoder(img[None, None].astype(np.float32), AutoencoderSpec(input_side=args.side),
                                    TrainConfig(epochs=args.ae_epochs, batch_size=1))
    seg = kmeans_segment(img, encoder=encoder, k=args.k)
    tumor = extract_tumor_mask(seg, img)
    save_png(render_overlay(img, seg, background=int(seg.max())), args.overlay)
    print(f"tumor pixels {int(tumor.sum())}; overlay -> {args.overlay}")
    if ref is not None:
        print(f"Dice vs reference {dice(tumor.astype(int), np.asarray(ref).astype(int)):.4f}")


if __name__ == "__main__":
    main()
