#!/usr/bin/env python3
"""Build the desk-scale grayscale data root from the npm `mnist` and
`fashion-mnist` packages.

Writes IDX files (gzip) under <root>/mnist and <root>/fashion-mnist using the
same file names as the canonical distributions, so the loaders treat both
sources identically. Requires `npm` on PATH.

    python3 scripts/fetch_desk_data.py data
"""
import gzip
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile

import numpy as np

# At most this many images per class are kept; 80% go to train, 20% to test.
PER_CLASS_CAP = 1000


def npm_fetch(pkg, workdir):
    out = subprocess.run(["npm", "pack", pkg], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()[-1]
    with tarfile.open(os.path.join(workdir, out)) as tf:
        tf.extractall(os.path.join(workdir, pkg))
    return os.path.join(workdir, pkg, "package")


def write_idx(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    if arr.ndim == 3:
        header = struct.pack(">IIII", 0x0803, *arr.shape)
    else:
        header = struct.pack(">II", 0x0801, arr.shape[0])
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header)
        f.write(arr.tobytes())


def split(per_class, out_dir):
    rng = np.random.RandomState(0)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for label, imgs in enumerate(per_class):
        imgs = imgs[:PER_CLASS_CAP]
        n_train = (len(imgs) * 4) // 5
        tr_x.append(imgs[:n_train])
        te_x.append(imgs[n_train:])
        tr_y += [label] * n_train
        te_y += [label] * (len(imgs) - n_train)
    os.makedirs(out_dir, exist_ok=True)
    for name, xs, ys in (("train", tr_x, tr_y), ("t10k", te_x, te_y)):
        x = np.concatenate(xs).reshape(-1, 28, 28)
        y = np.asarray(ys)
        perm = rng.permutation(len(y))
        write_idx(os.path.join(out_dir, f"{name}-images-idx3-ubyte.gz"), x[perm])
        write_idx(os.path.join(out_dir, f"{name}-labels-idx1-ubyte.gz"), y[perm])


def main():
    root = sys.argv[1] if len(sys.argv) > 1 else "data"
    with tempfile.TemporaryDirectory() as tmp:
        pkg = npm_fetch("mnist@1.1.0", tmp)
        digits = []
        for d in range(10):
            flat = np.asarray(json.load(open(f"{pkg}/src/digits/{d}.json"))["data"])
            digits.append(np.rint(flat * 255.0).astype(np.uint8).reshape(-1, 784))
        split(digits, os.path.join(root, "mnist"))

        pkg = npm_fetch("fashion-mnist@1.1.0", tmp)
        clothes = []
        for c in range(10):
            rows = json.load(open(f"{pkg}/src/clothes/{c}.json"))["data"]
            clothes.append(np.asarray([r for r in rows if len(r) == 784], dtype=np.uint8))
        split(clothes, os.path.join(root, "fashion-mnist"))


if __name__ == "__main__":
    main()
