#!/usr/bin/env python3
"""Convert the digit sample shipped in the `mnist` npm package into IDX files.

Usage: convert_npm_mnist.py <package/src/digits> <out_dir>

The package stores 10,000 MNIST digits as normalized floats grouped by
label. They are shuffled with a fixed seed and split 8000/2000 into
gzipped IDX train/test files.
"""
import gzip
import json
import os
import random
import struct
import sys


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src, out = sys.argv[1], sys.argv[2]
    items = []
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as f:
            flat = json.load(f)["data"]
        for i in range(len(flat) // 784):
            px = [min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784]]
            items.append((px, digit))
    random.Random(0).shuffle(items)
    train, test = items[:8000], items[8000:]
    os.makedirs(out, exist_ok=True)
    write_idx_images(os.path.join(out, "train-images-idx3-ubyte.gz"), [p for p, _ in train])
    write_idx_labels(os.path.join(out, "train-labels-idx1-ubyte.gz"), [l for _, l in train])
    write_idx_images(os.path.join(out, "test-images-idx3-ubyte.gz"), [p for p, _ in test])
    write_idx_labels(os.path.join(out, "test-labels-idx1-ubyte.gz"), [l for _, l in test])


if __name__ == "__main__":
    main()
