"""Build MNIST-format IDX files from the digits bundled in the ``mnist`` npm package.

The package ships 1000 real MNIST digits per class as JSON arrays of
intensities in [0, 1] with three decimals. They are rounded back to uint8,
shuffled with a fixed seed and split into equal train/test halves.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import sys
from pathlib import Path

import numpy as np

from auglaplace.data import write_idx


def main(digits_dir, out_dir, seed=0):
    images, labels = [], []
    for c in range(10):
        raw = np.asarray(json.loads((Path(digits_dir) / f"{c}.json").read_text())["data"])
        px = np.rint(raw * 255).clip(0, 255).astype(np.uint8).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), c, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    perm = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[perm], labels[perm]
    half = len(labels) // 2
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte", out / "train-labels-idx1-ubyte", images[:half], labels[:half])
    write_idx(out / "t10k-images-idx3-ubyte", out / "t10k-labels-idx1-ubyte", images[half:], labels[half:])
    print(f"wrote {half} train / {len(labels) - half} test images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
