#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into gzipped IDX files.

The package ships 10,000 real MNIST digits (1,000 per class) as JSON arrays of
pixel intensities in [0, 1] rounded to three decimals. Multiplying by 255 and
rounding restores the original bytes.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist-subset

Per class, the first 800 digits go to the training split and the remaining
200 to the test split. Within each split, images are interleaved by class.
"""

import gzip
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS = 800
SIDE = 28


def load_digits(src: Path):
    per_class = []
    for label in range(10):
        raw = json.loads((src / f"{label}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        imgs = []
        for k in range(n):
            chunk = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            imgs.append(bytes(min(255, max(0, round(v * 255))) for v in chunk))
        per_class.append(imgs)
    return per_class


def interleave(per_class, lo, hi):
    images, labels = [], []
    for k in range(lo, hi):
        for label, imgs in enumerate(per_class):
            if k < len(imgs):
                images.append(imgs[k])
                labels.append(label)
    return images, labels


def write_idx(dst: Path, prefix: str, images, labels):
    with gzip.GzipFile(dst / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write(img)
    with gzip.GzipFile(dst / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    per_class = load_digits(src)
    longest = max(len(c) for c in per_class)
    write_idx(dst, "train", *interleave(per_class, 0, TRAIN_PER_CLASS))
    write_idx(dst, "t10k", *interleave(per_class, TRAIN_PER_CLASS, longest))


if __name__ == "__main__":
    main()
