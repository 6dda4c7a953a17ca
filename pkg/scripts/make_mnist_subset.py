"""Build IDX files for the 5000-image MNIST subset shipped inside the mlxtend wheel.

The sandbox has no direct route to the MNIST mirrors, but the package index is
reachable, and mlxtend bundles 5000 real MNIST digits as CSV. This script pulls
the wheel (no install), converts the CSV to gzipped IDX, and writes a fixed class-stratified split

    data/desk-train-{images-idx3,labels-idx1}-ubyte.gz   first 200 per class (2000)
    data/desk-test-{images-idx3,labels-idx1}-ubyte.gz    remaining 300 per class (3000)

Usage: python scripts/make_mnist_subset.py [--out data]
"""

import argparse
import glob
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "data"))
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp],
            check=True,
        )
        wheel = glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")

    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train.append(idx[:200])
        test.append(idx[200:])
    os.makedirs(args.out, exist_ok=True)
    for name, idx in (("desk-train", np.concatenate(train)), ("desk-test", np.concatenate(test))):
        write_pair(args.out, name, pixels[idx], labels[idx])
        print(f"wrote {len(idx)} images as {name}")


def write_pair(out, name, pixels, labels):
    n = len(labels)
    # mtime=0 keeps the gzip bytes reproducible
    with open(os.path.join(out, f"{name}-images-idx3-ubyte.gz"), "wb") as f:
        with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as g:
            g.write(struct.pack(">IIII", 0x803, n, 28, 28) + pixels.tobytes())
    with open(os.path.join(out, f"{name}-labels-idx1-ubyte.gz"), "wb") as f:
        with gzip.GzipFile(fileobj=f, mode="wb", mtime=0) as g:
            g.write(struct.pack(">II", 0x801, n) + labels.tobytes())


if __name__ == "__main__":
    main()
