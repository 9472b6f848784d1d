"""Convert the 5,000-digit MNIST sample shipped with mlxtend into IDX files.

Usage::

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz tests/data/mnist5k

Writes gzipped ``train-*`` (4,000 images) and ``t10k-*`` (1,000 images) IDX
files, stratified 400/100 per class with a fixed shuffle.
"""
import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, array, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as fh:
        fh.write(struct.pack(">I", magic))
        for n in array.shape:
            fh.write(struct.pack(">I", n))
        fh.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def main(csv_path, out_dir):
    raw = np.loadtxt(csv_path, delimiter=",", dtype=np.int64)
    images = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.uint8)
    rng = np.random.default_rng(2023)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        train_idx.append(idx[:400])
        test_idx.append(idx[400:])
    train_idx = rng.permutation(np.concatenate(train_idx))
    test_idx = rng.permutation(np.concatenate(test_idx))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "train-images-idx3-ubyte.gz", images[train_idx], 0x803)
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train_idx], 0x801)
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test_idx], 0x803)
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test_idx], 0x801)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
