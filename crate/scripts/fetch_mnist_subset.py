#!/usr/bin/env python3
"""Write a balanced 5000-image MNIST subset as IDX files.

The images come from the `mnist_5k.csv.gz` file shipped inside the mlxtend
wheel (500 images per digit). The first 4000 rows of a seeded shuffle become
the `train` split, the remaining 1000 the `t10k` split.

    python3 scripts/fetch_mnist_subset.py [out_dir]
"""

import gzip
import io
import random
import struct
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def fetch_rows():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", tmp, "mlxtend"],
            check=True,
            stdout=subprocess.DEVNULL,
        )
        wheel = next(Path(tmp).glob("mlxtend-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            raw = gzip.decompress(z.read(MEMBER))
    rows = []
    for line in io.StringIO(raw.decode()):
        vals = [int(float(v)) for v in line.strip().split(",") if v]
        if len(vals) == 785:
            rows.append((vals[:784], vals[784]))
    return rows


def write_idx(out, prefix, rows):
    n = len(rows)
    with open(out / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))
    with open(out / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(label for _, label in rows))


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    rows = fetch_rows()
    if len(rows) != 5000:
        sys.exit(f"expected 5000 rows, found {len(rows)}")
    random.Random(0).shuffle(rows)
    write_idx(out, "train", rows[:4000])
    write_idx(out, "t10k", rows[4000:])
    print(f"wrote {out}: 4000 train, 1000 test")


if __name__ == "__main__":
    main()
