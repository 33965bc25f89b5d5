#!/usr/bin/env python3
"""Render the procedural shape dataset and export it as an IDX file pair.

    python scripts/export_dataset.py out/shapes --classes 8 --per-class 50 --seed 42
"""

import argparse
from pathlib import Path

from advdissect.datagen import ShapeDatasetConfig, generate, save_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("prefix", help="output prefix; writes <prefix>-images.idx and <prefix>-labels.idx")
    parser.add_argument("--classes", type=int, default=8)
    parser.add_argument("--per-class", type=int, default=50)
    parser.add_argument("--size", type=int, default=32)
    parser.add_argument("--noise", type=float, default=0.02)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args()

    ds = generate(ShapeDatasetConfig(
        num_classes=args.classes, samples_per_class=args.per_class,
        image_size=(args.size, args.size), noise_std=args.noise, seed=args.seed,
    ))
    prefix = Path(args.prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    images, labels = f"{prefix}-images.idx", f"{prefix}-labels.idx"
    save_idx(ds, images, labels)
    print(f"wrote {len(ds)} images to {images} and labels to {labels}")


if __name__ == "__main__":
    main()
