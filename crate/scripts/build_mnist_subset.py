#!/usr/bin/env python3
"""Build gzipped IDX files from the 10k MNIST digits bundled in the `mnist` npm package.

Usage: scripts/build_mnist_subset.py <path-to-unpacked-npm-package> <out-dir>

The package stores each digit as 784 floats (pixel / 255 rounded to 3 decimals);
adjacent byte levels differ by more than the rounding step, so the original
bytes are recovered exactly. Per digit, the first 80% go to the training split
and the rest to the test split; both splits are interleaved round-robin by digit.
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        images = [bytes(round(v * 255) for v in flat[i:i + 784]) for i in range(0, len(flat), 784)]
        cut = int(len(images) * 0.8)
        train.append([(img, digit) for img in images[:cut]])
        test.append([(img, digit) for img in images[cut:]])

    def interleave(groups):
        result, i = [], 0
        while any(i < len(g) for g in groups):
            result.extend(g[i] for g in groups if i < len(g))
            i += 1
        return result

    for name, groups in (("train", train), ("t10k", test)):
        rows = interleave(groups)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(rows), 28, 28),
                  b"".join(img for img, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(rows),),
                  bytes(lbl for _, lbl in rows))
        print(name, len(rows))


if __name__ == "__main__":
    main()
