"""Convert the digits bundled with the ``mnist`` npm package into IDX files.

The npm package ships 10,000 MNIST digits as per-class JSON arrays of
pixel intensities rounded to three decimals. ``round(v * 255)`` recovers the
original bytes exactly. Digits are shuffled with a fixed seed and split
8,000 / 2,000 into train and held-out files.

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/build_mnist_subset.py package/src/digits data/mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from vqspike.data import write_idx


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("digits_dir", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n-train", type=int, default=8000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    images, labels = [], []
    for digit in range(10):
        with open(args.digits_dir / f"{digit}.json") as f:
            flat = np.asarray(json.load(f)["data"], dtype=np.float64)
        pix = np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 28, 28)
        images.append(pix)
        labels.append(np.full(len(pix), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(args.seed).permutation(len(images))
    images, labels = images[order], labels[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    n = args.n_train
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", images[:n])
    write_idx(args.out_dir / "train-labels-idx1-ubyte.gz", labels[:n])
    write_idx(args.out_dir / "test-images-idx3-ubyte.gz", images[n:])
    write_idx(args.out_dir / "test-labels-idx1-ubyte.gz", labels[n:])
    print(f"wrote {n} train / {len(images) - n} test digits to {args.out_dir}")


if __name__ == "__main__":
    main()
