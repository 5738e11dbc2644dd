#!/usr/bin/env python3
"""Build a 10,000-digit MNIST subset in IDX format.

The npm package `mnist` ships 10,000 MNIST digits as JSON arrays of
28x28 intensities in [0, 1]. This script unpacks it (via `npm pack`, or a
pre-downloaded tarball given with --tarball), interleaves the classes with
a fixed permutation and writes gzipped IDX image/label files.
"""
import argparse
import gzip
import json
import random
import struct
import subprocess
import tarfile
import tempfile
from pathlib import Path


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball", help="path to mnist-*.tgz (default: npm pack mnist@1.1.0)")
    ap.add_argument("--out-dir", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tarball = args.tarball
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            tarball = str(next(Path(tmp).glob("mnist-*.tgz")))
        with tarfile.open(tarball) as tf:
            tf.extractall(tmp)
        samples = []
        for digit in range(10):
            flat = json.loads((Path(tmp) / "package/src/digits" / f"{digit}.json").read_text())["data"]
            for i in range(len(flat) // 784):
                px = bytes(min(255, max(0, round(v * 255))) for v in flat[i * 784:(i + 1) * 784])
                samples.append((px, digit))

    random.Random(20190901).shuffle(samples)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(samples)
    with gzip.GzipFile(out / "mnist10k-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for px, _ in samples:
            f.write(px)
    with gzip.GzipFile(out / "mnist10k-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(d for _, d in samples))
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main()
