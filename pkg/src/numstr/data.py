"""Digit-archive ingestion, synthetic numeral-string construction and dataset I/O."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

from .core import BoundingBox, ConfigError, ConsistencyError, DigitAnnotation, FormatError, StringSample, check_digit

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")
ANNOTATION_HEADER = "#format=1"

ByteSource = Union[bytes, bytearray, BinaryIO]


class TruncatedStreamError(OSError):
    """A stream ended before its declared payload."""


class ParseError(FormatError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ValidationError(FormatError):
    pass


@dataclass
class DigitSet:
    images: list[np.ndarray]
    labels: list[int]
    source_ids: list[int]

    def __post_init__(self):
        if not len(self.images) == len(self.labels) == len(self.source_ids):
            raise ConsistencyError("images, labels and source_ids must have equal lengths")
        self.labels = [check_digit(v) for v in self.labels]

    def __len__(self):
        return len(self.images)


@dataclass
class SynthConfig:
    min_len: int = 2
    max_len: int = 6
    gap_distribution: tuple[int, int] = (-6, 12)
    border: int = 5
    seed: int = 0
    count: int = 1000
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    jitter: float = 0.15

    def __post_init__(self):
        # min_len=1 is accepted for isolated-digit sets
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.count <= 0:
            raise ConfigError("count must be positive")
        if self.border < 0:
            raise ConfigError("border must be non-negative")
        lo, hi = self.gap_distribution
        if lo > hi:
            raise ConfigError(f"empty gap range {self.gap_distribution}")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must be three non-negative reals summing to 1, got {fr}")
        if not 0 <= self.jitter < 0.5:
            raise ConfigError("jitter must lie in [0, 0.5)")


@dataclass
class Dataset:
    samples: list[StringSample]
    split_tag: str = "train"

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.split_tag == other.split_tag and self.samples == other.samples


# ---------------------------------------------------------------- IDX ingestion


def _read_all(src: ByteSource) -> bytes:
    if isinstance(src, (bytes, bytearray)):
        return bytes(src)
    return src.read()


def _header(buf: bytes, n: int, what: str) -> tuple[int, ...]:
    if len(buf) == 0:
        raise FormatError(f"{what}: empty stream, missing header")
    if len(buf) < 4 * n:
        raise TruncatedStreamError(f"{what}: header truncated ({len(buf)} bytes)")
    return struct.unpack(f">{n}I", buf[: 4 * n])


def parse_idx_images(src: ByteSource) -> np.ndarray:
    buf = _read_all(src)
    if len(buf) == 0:
        raise FormatError("image stream: empty stream, missing header")
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] != IMAGE_MAGIC:
        raise FormatError(f"image stream: bad magic 0x{struct.unpack('>I', buf[:4])[0]:08x}")
    magic, count, rows, cols = _header(buf, 4, "image stream")
    size = count * rows * cols
    if len(buf) < 16 + size:
        raise TruncatedStreamError(f"image stream: expected {size} pixel bytes, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=16).reshape(count, rows, cols)


def parse_idx_labels(src: ByteSource) -> np.ndarray:
    buf = _read_all(src)
    if len(buf) == 0:
        raise FormatError("label stream: empty stream, missing header")
    if len(buf) >= 4 and struct.unpack(">I", buf[:4])[0] != LABEL_MAGIC:
        raise FormatError(f"label stream: bad magic 0x{struct.unpack('>I', buf[:4])[0]:08x}")
    magic, count = _header(buf, 2, "label stream")
    if len(buf) < 8 + count:
        raise TruncatedStreamError(f"label stream: expected {count} labels, found {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).copy()


def _declared_count(src_bytes: bytes) -> int | None:
    return struct.unpack(">I", src_bytes[4:8])[0] if len(src_bytes) >= 8 else None


def trim_to_ink(raster: np.ndarray) -> np.ndarray:
    """Crop a dark-on-white raster to the bounding box of its non-white pixels."""
    ink = raster < 255
    if not ink.any():
        return raster
    rows = np.flatnonzero(ink.any(axis=1))
    cols = np.flatnonzero(ink.any(axis=0))
    return raster[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def load_idx(image_bytes: ByteSource, label_bytes: ByteSource) -> DigitSet:
    """Parse an IDX image/label pair into trimmed dark-ink-on-white rasters.

    Polarity is decided once per archive: if the median pixel is dark the
    archive is light-on-dark and every raster is inverted.
    """
    ibuf, lbuf = _read_all(image_bytes), _read_all(label_bytes)
    n_img, n_lab = _declared_count(ibuf), _declared_count(lbuf)
    if n_img is not None and n_lab is not None and len(ibuf) >= 4 and len(lbuf) >= 4:
        if (
            struct.unpack(">I", ibuf[:4])[0] == IMAGE_MAGIC
            and struct.unpack(">I", lbuf[:4])[0] == LABEL_MAGIC
            and n_img != n_lab
        ):
            raise ConsistencyError(f"image stream declares {n_img} records, label stream {n_lab}")
    images = parse_idx_images(ibuf)
    labels = parse_idx_labels(lbuf)
    if len(labels) and labels.max() > 9:
        raise FormatError(f"label value {int(labels.max())} outside [0, 9]")
    if images.size and np.median(images) < 128:
        images = 255 - images
    rasters = [np.ascontiguousarray(trim_to_ink(im)) for im in images]
    return DigitSet(rasters, [int(v) for v in labels], list(range(len(rasters))))


def open_maybe_gzip(path: str | os.PathLike) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def write_idx(images: np.ndarray, labels: Sequence[int], image_path, label_path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(image_path).write_bytes(struct.pack(">4I", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    lab = np.asarray(labels, dtype=np.uint8)
    Path(label_path).write_bytes(struct.pack(">2I", LABEL_MAGIC, len(lab)) + lab.tobytes())


# ---------------------------------------------------------------- synthesis


def min_gap(left_width: int, right_width: int) -> int:
    return -min(left_width, right_width) + 1


def synth_string(
    digits: Sequence[tuple[np.ndarray, int]],
    gaps: Sequence[int],
    border: int = 5,
    rng: np.random.Generator | None = None,
    jitter: float = 0.15,
) -> StringSample:
    """Concatenate digit rasters left to right into one annotated string image.

    Digit k+1 starts `gaps[k]` pixels after digit k ends; negative gaps overlap
    and overlapping ink keeps the darker pixel. Digits are vertically centred,
    each shifted by up to ``jitter * height`` when an `rng` is given.
    """
    if len(digits) == 0:
        raise ValueError("need at least one digit")
    if len(gaps) != len(digits) - 1:
        raise ValueError(f"expected {len(digits) - 1} gaps, got {len(gaps)}")
    if border < 0:
        raise ValueError("border must be non-negative")
    rasters = [np.asarray(r, dtype=np.uint8) for r, _ in digits]
    classes = [check_digit(c) for _, c in digits]
    for k, g in enumerate(gaps):
        lo = min_gap(rasters[k].shape[1], rasters[k + 1].shape[1])
        if g < lo:
            raise ValueError(f"gap {g} between digits {k} and {k + 1} below minimum {lo}")

    lefts = [0]
    for k, g in enumerate(gaps):
        lefts.append(lefts[k] + rasters[k].shape[1] + int(g))
    tops = []
    for r in rasters:
        h = r.shape[0]
        shift = 0
        if rng is not None and jitter > 0:
            shift = int(round(rng.uniform(-jitter * h, jitter * h)))
        tops.append(shift - h // 2)

    x0 = min(lefts)
    y0 = min(tops)
    x1 = max(l + r.shape[1] for l, r in zip(lefts, rasters))
    y1 = max(t + r.shape[0] for t, r in zip(tops, rasters))
    canvas = np.full((y1 - y0 + 2 * border, x1 - x0 + 2 * border), 255, dtype=np.uint8)
    annotations = []
    for left, top, r, c in zip(lefts, tops, rasters, classes):
        x = left - x0 + border
        y = top - y0 + border
        h, w = r.shape
        region = canvas[y : y + h, x : x + w]
        np.minimum(region, r, out=region)
        annotations.append(DigitAnnotation(c, BoundingBox(float(x), float(y), float(x + w), float(y + h))))
    return StringSample(canvas, tuple(annotations), "".join(map(str, classes)))


def split_sizes(total: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    a = int(round(total * fractions[0]))
    b = int(round(total * fractions[1]))
    a = min(a, total)
    b = min(b, total - a)
    return a, b, total - a - b


def partition_pools(source: DigitSet, config: SynthConfig) -> list[np.ndarray]:
    """Split source record indices into three disjoint pools before any composition."""
    perm = np.random.default_rng([config.seed, 0x504F4F4C]).permutation(len(source))
    n_tr, n_va, _ = split_sizes(len(source), config.split_fractions)
    return [np.sort(perm[:n_tr]), np.sort(perm[n_tr : n_tr + n_va]), np.sort(perm[n_tr + n_va :])]


def make_sample(source: DigitSet, pool: np.ndarray, config: SynthConfig, rng: np.random.Generator) -> StringSample:
    length = int(rng.integers(config.min_len, config.max_len + 1))
    picks = rng.integers(0, len(pool), size=length)
    digits = [(source.images[pool[p]], source.labels[pool[p]]) for p in picks]
    lo, hi = config.gap_distribution
    raw = rng.integers(lo, hi + 1, size=length - 1)
    gaps = [
        max(int(g), min_gap(digits[k][0].shape[1], digits[k + 1][0].shape[1])) for k, g in enumerate(raw)
    ]
    return synth_string(digits, gaps, config.border, rng=rng, jitter=config.jitter)


def generate_dataset(config: SynthConfig, source: DigitSet) -> tuple[Dataset, Dataset, Dataset]:
    """Build train/val/test string sets whose digits come from disjoint source pools.

    Sample i of split s uses its own generator seeded by (seed, s, i), so the
    output is a pure function of (config, source).
    """
    if len(source) == 0:
        raise ConfigError("source digit set is empty")
    pools = partition_pools(source, config)
    counts = split_sizes(config.count, config.split_fractions)
    out = []
    for s, (tag, pool, n) in enumerate(zip(SPLITS, pools, counts)):
        if n > 0 and len(pool) == 0:
            raise ConfigError(f"{tag} pool is empty; cannot form {n} strings")
        samples = [make_sample(source, pool, config, np.random.default_rng([config.seed, s, i])) for i in range(n)]
        out.append(Dataset(samples, tag))
    return tuple(out)


# ---------------------------------------------------------------- PGM + dataset files


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if len(buf) - pos < w * h:
        raise TruncatedStreamError(f"{path}: pixel data truncated")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = [f"{ANNOTATION_HEADER}\tsplit={ds.split_tag}"]
    for i, sample in enumerate(ds.samples):
        name = f"{i:06d}.pgm"
        write_pgm(root / "images" / name, sample.image)
        for k, a in enumerate(sample.annotations):
            b = a.box
            lines.append(
                "\t".join(
                    [name, sample.label, str(k), str(a.digit), repr(b.x_min), repr(b.y_min), repr(b.x_max), repr(b.y_max)]
                )
            )
    with open(root / "annotations.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "annotations.tsv"
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or not lines[0].startswith(ANNOTATION_HEADER):
        raise ParseError(f"missing '{ANNOTATION_HEADER}' header", 1)
    split_tag = "test"
    for field_ in lines[0].split("\t")[1:]:
        key, _, value = field_.partition("=")
        if key == "split":
            split_tag = value
    rows: dict[str, list[tuple[int, str, DigitAnnotation]]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 8:
            raise ParseError(f"expected 8 tab-separated fields, got {len(parts)}", lineno)
        name, label, idx, digit, *coords = parts
        try:
            idx_i = int(idx)
            digit_i = int(digit)
            xs = [float(c) for c in coords]
        except ValueError as exc:
            raise ParseError(f"malformed number ({exc})", lineno) from exc
        try:
            ann = DigitAnnotation(digit_i, BoundingBox(*xs))
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        rows.setdefault(name, []).append((idx_i, label, ann))
    samples = []
    for name, entries in rows.items():
        img_path = root / "images" / name
        if not img_path.exists():
            raise FileNotFoundError(f"{img_path} referenced by annotations.tsv is missing")
        entries.sort(key=lambda e: e[0])
        if [e[0] for e in entries] != list(range(len(entries))):
            raise ValidationError(f"{name}: digit indices are not 0..{len(entries) - 1}")
        labels = {e[1] for e in entries}
        if len(labels) != 1:
            raise ValidationError(f"{name}: inconsistent label strings {sorted(labels)}")
        try:
            samples.append(StringSample(read_pgm(img_path), tuple(e[2] for e in entries), entries[0][1]))
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise ValidationError(f"{name}: {exc}") from exc
    return Dataset(samples, split_tag)


def save_splits(splits: Sequence[Dataset], root) -> None:
    for ds in splits:
        save_dataset(ds, Path(root) / ds.split_tag)


def resolve_dataset_dir(root, prefer: str) -> Path:
    """Accept either a dataset directory or a directory holding train/val/test splits."""
    root = Path(root)
    if (root / "annotations.tsv").exists():
        return root
    if (root / prefer / "annotations.tsv").exists():
        return root / prefer
    raise FileNotFoundError(f"{root} holds neither annotations.tsv nor a {prefer}/ split")
