#!/usr/bin/env python3
"""Convert SVHN cropped-digit .mat files to CIFAR-10 style binary records.

Each output record is one label byte (0-9, the source label 10 maps to 0)
followed by 3072 pixel bytes: the 32x32 red plane, then green, then blue.

    convert_svhn.py train_32x32.mat test_32x32.mat OUT_DIR

writes OUT_DIR/train.bin and OUT_DIR/test.bin for `lss ingest` with
data.format = svhn.
"""

import argparse
import pathlib

import numpy as np
import scipy.io


def convert(src, dst):
    mat = scipy.io.loadmat(src)
    x = mat["X"]  # (32, 32, 3, N)
    y = mat["y"].reshape(-1).astype(np.int64) % 10
    n = x.shape[3]
    planes = np.transpose(x, (3, 2, 0, 1)).reshape(n, 3072).astype(np.uint8)
    records = np.concatenate([y.astype(np.uint8)[:, None], planes], axis=1)
    dst.write_bytes(records.tobytes())
    return n


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("train_mat")
    ap.add_argument("test_mat")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = convert(args.train_mat, out / "train.bin")
    n_test = convert(args.test_mat, out / "test.bin")
    print(f"wrote {n_train} train and {n_test} test records to {out}")


if __name__ == "__main__":
    main()
