#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the 5k sample shipped in the
mlxtend wheel (500 images per digit). Output: data/mnist/{train,t10k}-*-idx*-ubyte.gz

usage: pip download --no-deps mlxtend -d /tmp/mlx && python3 scripts/make_mnist_subset.py /tmp/mlx/mlxtend-*.whl
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np

TRAIN = 4000


def write_idx(path, magic, arr):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + arr.astype(np.uint8).tobytes())


def main():
    whl = sys.argv[1]
    out = Path(__file__).resolve().parent.parent / "data" / "mnist"
    out.mkdir(parents=True, exist_ok=True)
    raw = gzip.decompress(zipfile.ZipFile(whl).read("mlxtend/data/data/mnist_5k.csv.gz"))
    a = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.uint8)
    perm = np.random.default_rng(20240611).permutation(len(a))
    a = a[perm]
    images = a[:, :-1].reshape(-1, 28, 28)
    labels = a[:, -1]
    write_idx(out / "train-images-idx3-ubyte.gz", 0x803, images[:TRAIN])
    write_idx(out / "train-labels-idx1-ubyte.gz", 0x801, labels[:TRAIN])
    write_idx(out / "t10k-images-idx3-ubyte.gz", 0x803, images[TRAIN:])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", 0x801, labels[TRAIN:])


if __name__ == "__main__":
    main()
