#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into gzipped IDX files.

The npm package (https://github.com/cazala/mnist) ships roughly 10k MNIST
digits as JSON arrays of 28x28 intensities scaled to [0, 1] and rounded to
three decimals. Rounding back with round(v * 255) recovers the original bytes.

Usage:
    npm pack mnist            # produces mnist-1.1.0.tgz
    tar xzf mnist-1.1.0.tgz   # unpacks into ./package
    python3 scripts/import_digits.py package/src/digits data/

Images are written class by class (all zeros, then all ones, ...). The
train/test split is done by `sada` itself with a fixed seed.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> int:
    if len(sys.argv) != 3:
        print(__doc__, file=sys.stderr)
        return 2
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)

    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        if len(data) % (SIDE * SIDE) != 0:
            raise ValueError(f"{digit}.json: length {len(data)} is not a multiple of 784")
        count = len(data) // (SIDE * SIDE)
        pixels.extend(max(0, min(255, round(v * 255))) for v in data)
        labels.extend([digit] * count)
        print(f"digit {digit}: {count} images")

    n = len(labels)
    with gzip.GzipFile(out / "digits-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        f.write(bytes(pixels))
    with gzip.GzipFile(out / "digits-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(labels))
    print(f"wrote {n} images to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
