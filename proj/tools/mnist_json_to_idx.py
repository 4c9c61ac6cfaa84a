#!/usr/bin/env python3
"""Convert the per-digit JSON files shipped by the `mnist` npm package
(10,000 MNIST digits, 28x28, values in [0,1]) into IDX files.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_json_to_idx.py package/src/digits data/mnist

Samples are interleaved across classes, shuffled with a fixed seed and split
into a training part and a held-out test part.
"""
import argparse
import json
import pathlib
import random
import struct

SIDE = 28


def write_idx(path, dtype_code, dims, payload):
    with open(path, "wb") as f:
        f.write(bytes([0, 0, dtype_code, len(dims)]))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--test", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20190101)
    args = ap.parse_args()

    samples = []
    for label in range(10):
        raw = json.loads(pathlib.Path(args.digits_dir, f"{label}.json").read_text())["data"]
        n = len(raw) // (SIDE * SIDE)
        for i in range(n):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, max(0, round(v * 255))) for v in px), label))

    random.Random(args.seed).shuffle(samples)
    test = samples[:args.test]
    train = samples[args.test:]
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("t10k", test)):
        write_idx(out / f"{name}-images-idx3-ubyte", 0x08, [len(part), SIDE, SIDE],
                  b"".join(p for p, _ in part))
        write_idx(out / f"{name}-labels-idx1-ubyte", 0x08, [len(part)],
                  bytes(l for _, l in part))
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()
