"""Build IDX image/label files from a CSV digit dump.

Input: a (optionally gzipped) CSV with 784 pixel columns (0-255) followed by
the label, one digit per row, such as the 5000-row MNIST sample bundled with
the mlxtend wheel (``mlxtend/data/data/mnist_5k.csv.gz``).

    python3 scripts/make_mnist_idx.py mnist_5k.csv.gz data/mnist

writes ``data/mnist/images-idx3-ubyte`` and ``data/mnist/labels-idx1-ubyte``
with rows in a seeded shuffled order.
"""

from __future__ import annotations

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from predcode.data import write_idx


def read_csv(path: Path) -> np.ndarray:
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as zf:
            raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
        return np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    return np.loadtxt(path, delimiter=",", dtype=np.int64)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path, help="CSV(.gz) file or mlxtend wheel")
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rows = read_csv(args.source)
    if rows.shape[1] != 785:
        raise SystemExit(f"expected 785 columns, got {rows.shape[1]}")
    rows = rows[np.random.default_rng(args.seed).permutation(rows.shape[0])]
    images = rows[:, :784].reshape(-1, 28, 28).astype(np.uint8)
    labels = rows[:, 784].astype(np.uint8)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "images-idx3-ubyte", images)
    write_idx(args.out_dir / "labels-idx1-ubyte", labels)
    print(f"wrote {images.shape[0]} items to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
