#!/usr/bin/env python3
"""Materialize MNIST as standard IDX files.

Two sources are supported:

  official  download the four gzip'd IDX files from a mirror URL
  npm       repack the 10,000 digits bundled with the `mnist` npm package
            (requires `npm` on PATH); split 8,000 train / 2,000 test

The output directory receives train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte.
"""

import argparse
import gzip
import json
import random
import shutil
import struct
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

FILES = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
]


def write_idx(out: Path, stem: str, images, labels):
    with open(out / f"{stem}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(out / f"{stem}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def from_npm(out: Path, train_count: int, seed: int):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(Path(tmp) / "mnist-1.1.0.tgz") as tar:
            tar.extractall(tmp)
        samples = []
        for digit in range(10):
            raw = json.loads((Path(tmp) / "package/src/digits" /
                              f"{digit}.json").read_text())["data"]
            for start in range(0, len(raw) - 783, 784):
                pix = [min(255, max(0, round(v * 255.0)))
                       for v in raw[start:start + 784]]
                samples.append((pix, digit))
    random.Random(seed).shuffle(samples)
    train, test = samples[:train_count], samples[train_count:]
    write_idx(out, "train", [s[0] for s in train], [s[1] for s in train])
    write_idx(out, "t10k", [s[0] for s in test], [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test digits to {out}")


def from_official(out: Path, base_url: str):
    for name in FILES:
        url = f"{base_url.rstrip('/')}/{name}.gz"
        with urllib.request.urlopen(url) as resp:
            data = gzip.decompress(resp.read())
        (out / name).write_bytes(data)
        print(f"fetched {name} ({len(data)} bytes)")


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawTextHelpFormatter)
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--source", choices=["npm", "official"], default="npm")
    ap.add_argument("--url",
                    default="https://storage.googleapis.com/cvdf-datasets/mnist")
    ap.add_argument("--train-count", type=int, default=8000)
    ap.add_argument("--seed", type=int, default=20190101)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.source == "npm":
        if shutil.which("npm") is None:
            sys.exit("npm not found on PATH")
        from_npm(out, args.train_count, args.seed)
    else:
        from_official(out, args.url)


if __name__ == "__main__":
    main()
