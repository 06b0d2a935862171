#!/usr/bin/env python3
"""Build the mnist-small IDX files from the `mnist` npm package.

The package ships 10,000 MNIST digits as JSON arrays of pixel/255 values
rounded to three decimals; rounding back to bytes recovers the originals
exactly. Every fifth sample of each digit goes to the test split.

usage: fetch_mnist_subset.py OUT_DIR [--package-dir DIR]
"""
import argparse
import json
import pathlib
import random
import struct
import subprocess
import tarfile
import tempfile


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def locate_package(package_dir):
    if package_dir:
        return pathlib.Path(package_dir)
    tmp = pathlib.Path(tempfile.mkdtemp())
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                   stdout=subprocess.DEVNULL)
    with tarfile.open(tmp / "mnist-1.1.0.tgz") as tar:
        tar.extractall(tmp)
    return tmp / "package"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out_dir")
    ap.add_argument("--package-dir")
    args = ap.parse_args()
    pkg = locate_package(args.package_dir)

    train, test = [], []
    for digit in range(10):
        raw = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(raw) // 784
        for j in range(n):
            px = [int(round(v * 255)) for v in raw[j * 784:(j + 1) * 784]]
            (test if j % 5 == 4 else train).append((px, digit))

    rnd = random.Random(20210101)
    rnd.shuffle(train)
    rnd.shuffle(test)
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("t10k", test)):
        write_idx_images(out / f"{name}-images-idx3-ubyte", [r[0] for r in rows])
        write_idx_labels(out / f"{name}-labels-idx1-ubyte", [r[1] for r in rows])
    print(f"train={len(train)} test={len(test)} -> {out}")


if __name__ == "__main__":
    main()
