"""Convert the digit JSON files shipped in the npm ``mnist`` package to IDX.

The npm package bundles ~10k MNIST digits as flat float arrays quantised to
three decimals.  This writes a seeded 8000/rest train/test split as gzipped
IDX files that ``hsplid.datasets.load_mnist_dir`` reads.

    npm pack mnist && tar xzf mnist-*.tgz
    python tools/npm_mnist_to_idx.py package/src/digits data/mnist
"""
import gzip
import json
import sys
from pathlib import Path

import numpy as np

from hsplid.datasets import write_idx

N_TRAIN = 8000


def main(src, dst, seed=0):
    images, labels = [], []
    for digit in range(10):
        raw = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        raw = raw.reshape(-1, 28, 28)
        images.append(np.rint(raw * 255).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(raw), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    parts = {
        "train": slice(0, N_TRAIN),
        "t10k": slice(N_TRAIN, None),
    }
    for prefix, sl in parts.items():
        for kind, arr in (("images-idx3", images[sl]), ("labels-idx1", labels[sl])):
            blob = gzip.compress(write_idx(arr), mtime=0)
            (dst / f"{prefix}-{kind}-ubyte.gz").write_bytes(blob)


if __name__ == "__main__":
    main(*sys.argv[1:3])
