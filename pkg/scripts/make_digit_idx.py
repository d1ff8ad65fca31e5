"""Write the 10,000 MNIST digits bundled with the npm `mnist` package as an IDX image/label pair.

    python3 scripts/make_digit_idx.py [data/] [--tarball mnist-1.1.0.tgz]

The tarball is fetched with `npm pack` unless given. Its digits are stored
per class as JSON lists of intensities in [0, 1] rounded to three decimals;
they are restored to the original 8-bit values and written in package order
(all 0s, then all 1s, ...).
"""

import argparse
import json
import subprocess
import tarfile
import tempfile
from pathlib import Path

import numpy as np

from numstr.data import write_idx

DATA = Path(__file__).resolve().parents[1] / "data"
IMAGES, LABELS = "digits-images-idx3-ubyte", "digits-labels-idx1-ubyte"
PACKAGE = "mnist@1.1.0"


def fetch(dest: Path) -> Path:
    out = subprocess.run(
        ["npm", "pack", PACKAGE, "--pack-destination", str(dest), "--silent"],
        check=True, capture_output=True, text=True,
    )
    return dest / out.stdout.strip().splitlines()[-1]


def read_tarball(path: Path):
    images, labels = [], []
    with tarfile.open(path) as tar:
        for digit in range(10):
            data = json.load(tar.extractfile(f"package/src/digits/{digit}.json"))["data"]
            pixels = np.rint(np.asarray(data, dtype=np.float64) * 255).astype(np.uint8)
            images.append(pixels.reshape(-1, 28, 28))
            labels.append(np.full(len(images[-1]), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def write(out: Path, tarball: Path | None = None):
    with tempfile.TemporaryDirectory() as tmp:
        images, labels = read_tarball(tarball or fetch(Path(tmp)))
    out.mkdir(parents=True, exist_ok=True)
    write_idx(images, labels, out / IMAGES, out / LABELS)
    return out / IMAGES, out / LABELS


def ensure(out: Path = DATA):
    """Paths of the IDX pair, creating it first if missing."""
    if not ((out / IMAGES).exists() and (out / LABELS).exists()):
        write(out)
    return out / IMAGES, out / LABELS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default=str(DATA))
    ap.add_argument("--tarball", type=Path, help="use a local copy of the npm tarball")
    args = ap.parse_args()
    images, _ = write(Path(args.out), args.tarball)
    print(f"wrote digits to {images.parent}/")


if __name__ == "__main__":
    main()
