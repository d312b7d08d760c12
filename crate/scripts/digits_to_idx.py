#!/usr/bin/env python3
"""Convert the per-class JSON digit dumps of the `mnist` npm package into IDX files.

Usage: digits_to_idx.py <package>/src/digits <out-dir>

Every fifth sample of each class goes to the test split, the rest to train.
Samples are interleaved across classes so the unshuffled order is not sorted by label.
"""
import json
import os
import struct
import sys

SIZE = 28 * 28


def write_idx(out_dir, prefix, samples):
    images = bytearray()
    labels = bytearray()
    for label, pixels in samples:
        images.extend(min(255, max(0, round(v * 255))) for v in pixels)
        labels.append(label)
    with open(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        f.write(images)
    with open(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(labels)


def main():
    src, out_dir = sys.argv[1], sys.argv[2]
    os.makedirs(out_dir, exist_ok=True)
    keyed = {"train": [], "test": []}
    for label in range(10):
        with open(os.path.join(src, f"{label}.json")) as f:
            data = json.load(f)["data"]
        for i in range(len(data) // SIZE):
            split = "test" if i % 5 == 4 else "train"
            keyed[split].append(((i, label), (label, data[i * SIZE:(i + 1) * SIZE])))
    for split, items in keyed.items():
        items.sort(key=lambda kv: kv[0])
        write_idx(out_dir, split, [s for _, s in items])
        print(split, len(items))


if __name__ == "__main__":
    main()
