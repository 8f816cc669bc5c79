#!/usr/bin/env python3
"""Put MNIST IDX files in a directory.

Tries the usual mirrors of the full 60k/10k set first. If none answers,
falls back to the 10,000 digits bundled in the `mnist` npm package
(1.1.0), written as a single shuffled training split.
"""

import argparse
import gzip
import json
import random
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
MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "http://yann.lecun.com/exdb/mnist/",
]


def try_mirrors(out: Path, timeout: float) -> bool:
    for base in MIRRORS:
        try:
            blobs = {}
            for name in FILES:
                with urllib.request.urlopen(base + name + ".gz", timeout=timeout) as r:
                    blobs[name] = gzip.decompress(r.read())
        except Exception as e:  # noqa: BLE001 - any failure means try the next mirror
            print(f"mirror {base} unavailable: {e}", file=sys.stderr)
            continue
        for name, data in blobs.items():
            (out / name).write_bytes(data)
        print(f"wrote full MNIST from {base}")
        return True
    return False


def npm_digits(tarball: Path | None) -> dict[int, list[list[float]]]:
    with tempfile.TemporaryDirectory() as tmp:
        if tarball is None:
            subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=tmp, check=True,
                           stdout=subprocess.DEVNULL)
            tarball = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tarball) as tf:
            tf.extractall(tmp, filter="data")
        digits = {}
        for d in range(10):
            flat = json.loads((Path(tmp) / "package" / "src" / "digits" / f"{d}.json").read_text())["data"]
            if len(flat) % 784:
                raise ValueError(f"digit {d}: {len(flat)} values is not a multiple of 784")
            digits[d] = [flat[i:i + 784] for i in range(0, len(flat), 784)]
        return digits


def write_idx(out: Path, images: list[list[float]], labels: list[int]) -> None:
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(min(255, max(0, round(v * 255))) for v in img))
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/mnist", type=Path)
    ap.add_argument("--source", choices=["auto", "mirrors", "npm"], default="auto")
    ap.add_argument("--npm-tarball", type=Path, help="use a local mnist-1.1.0.tgz instead of `npm pack`")
    ap.add_argument("--timeout", type=float, default=15.0)
    ap.add_argument("--seed", type=int, default=0, help="shuffle seed for the npm fallback")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    if args.source in ("auto", "mirrors") and try_mirrors(args.out, args.timeout):
        return 0
    if args.source == "mirrors":
        return 1

    digits = npm_digits(args.npm_tarball)
    pairs = [(img, d) for d in range(10) for img in digits[d]]
    random.Random(args.seed).shuffle(pairs)
    write_idx(args.out, [p[0] for p in pairs], [p[1] for p in pairs])
    for name in FILES[2:]:
        (args.out / name).unlink(missing_ok=True)
    print(f"wrote {len(pairs)} npm digits as the training split in {args.out} (no test split)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
