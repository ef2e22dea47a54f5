#!/usr/bin/env python3
"""Generate the synthetic motif corpus as flat binary record files."""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from cooc import data


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="datasets/toy", help="output directory")
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=50)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for split, per_class in (("train", args.train_per_class), ("test", args.test_per_class)):
        images, labels = data.make_toy_dataset(per_class, rng, size=args.size)
        path = os.path.join(args.out, f"{split}.bin")
        data.write_records(path, images, labels)
        print(f"{path}: {len(labels)} records of {args.size}x{args.size}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
