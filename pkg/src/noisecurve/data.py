"""Seeded synthetic datasets and the RNL1 binary format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"RNL1"
KINDS = ("vector", "grid")


class DataFormatError(ValueError):
    code = "format"


class MagicError(DataFormatError):
    code = "magic-mismatch"


class HeaderError(DataFormatError):
    code = "bad-header"


class LengthError(DataFormatError):
    code = "length-mismatch"


@dataclass
class Dataset:
    kind: str
    shape: tuple          # (dim,) or (h, w, c)
    x: np.ndarray         # (n, *shape)
    labels: np.ndarray
    class_count: int
    seed: int = 0
    index: np.ndarray = field(default=None)  # original sample indices

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.shape = tuple(int(s) for s in self.shape)
        if (self.kind == "vector") != (len(self.shape) == 1) or len(self.shape) not in (1, 3):
            raise ValueError(f"shape {self.shape} does not fit kind {self.kind}")
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.shape[1:] != self.shape or self.x.shape[0] != self.labels.shape[0]:
            raise ValueError("samples and labels disagree with the declared shape")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        if self.index is None:
            self.index = np.arange(len(self.labels))
        self.index = np.asarray(self.index, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.shape))

    def flat(self) -> np.ndarray:
        return self.x.reshape(len(self), -1)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, x=self.x[rows], labels=self.labels[rows], index=self.index[rows])

    def with_samples(self, x) -> "Dataset":
        return replace(self, x=np.asarray(x, dtype=np.float64).reshape(self.x.shape))

    def equals(self, other) -> bool:
        return (self.kind == other.kind and self.shape == other.shape
                and self.class_count == other.class_count
                and np.array_equal(self.x, other.x) and np.array_equal(self.labels, other.labels))


def _check_sizes(C, n_per_class, min_classes=2):
    if C < min_classes or n_per_class < 1:
        raise ValueError(f"need C >= {min_classes} and n_per_class >= 1")


def _f32(x):
    # stored as f32 on disk; rounding here keeps save/load bit-exact
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def simplex_means(C, dim, distance):
    """C points in R^dim with all pairwise distances equal to ``distance``."""
    if dim < C - 1:
        raise ValueError(f"a {C}-class simplex needs dim >= {C - 1}")
    centred = np.eye(C) - 1.0 / C
    # orthonormal basis of the (C-1)-dim span, via reduced QR of the centred vertices
    q, _ = np.linalg.qr(centred.T[:, :C - 1])
    coords = centred @ q                       # (C, C-1), pairwise distance sqrt(2)
    out = np.zeros((C, dim))
    out[:, :C - 1] = coords * (distance / np.sqrt(2.0))
    return out


def gen_blobs(C, n_per_class, dim, spread, seed) -> Dataset:
    """Isotropic Gaussian classes around simplex vertices 4*spread apart."""
    _check_sizes(C, n_per_class)
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    rng = np.random.default_rng(seed)
    means = simplex_means(C, dim, 4.0 * spread if spread > 0 else 4.0)
    labels = np.repeat(np.arange(C), n_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, dim))
    return Dataset("vector", (dim,), _f32(x), labels, C, seed)


def gen_rings(C, n_per_class, seed, jitter=0.1) -> Dataset:
    """Concentric annuli of radii 1..C in 2-D.

    Radial jitter is Gaussian with std ``jitter``, clipped to 3 std.
    """
    _check_sizes(C, n_per_class, min_classes=1)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    noise = np.clip(rng.standard_normal(labels.size), -3.0, 3.0) * jitter
    radius = labels + 1.0 + noise
    angle = rng.uniform(0.0, 2.0 * np.pi, labels.size)
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return Dataset("vector", (2,), _f32(x), labels, max(C, 1), seed)


def texture_pattern(c, h, w, channels, phase=(0.0, 0.0)):
    """Class ``c``'s base pattern: a sinusoid plus a checker of class-specific period."""
    fy = 1 + c % 3
    fx = 1 + (c // 3) % 3
    period = 2 + c % 4
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    wave = np.sin(2 * np.pi * (fy * (yy + phase[0]) / h + fx * (xx + phase[1]) / w))
    checker = ((((yy + int(phase[0])) // period) + ((xx + int(phase[1])) // period)) % 2) * 2.0 - 1.0
    img = 0.5 + 0.25 * wave + 0.2 * checker * (1 if c % 2 == 0 else -1)
    return np.repeat(img[:, :, None], channels, axis=2)


def gen_textures(C, n_per_class, h, w, seed, channels=1, jitter=0.1, shift=2) -> Dataset:
    """Grid dataset of class-specific frequency/checker textures.

    Each sample gets a random phase shift of up to ``shift`` pixels and
    i.i.d. Gaussian pixel jitter of std ``jitter``.
    """
    _check_sizes(C, n_per_class)
    if h < 8 or w < 8:
        raise ValueError("textures need h, w >= 8")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    xs = np.empty((labels.size, h, w, channels))
    for i, c in enumerate(labels):
        phase = rng.integers(0, shift + 1, size=2) if shift else (0, 0)
        xs[i] = texture_pattern(int(c), h, w, channels, phase)
    xs += jitter * rng.standard_normal(xs.shape)
    return Dataset("grid", (h, w, channels), _f32(xs), labels, C, seed)


def stratified_split(ds: Dataset, ratio, seed):
    """(first, second) with ``ratio`` of every class in the first part."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in range(ds.class_count):
        rows = np.flatnonzero(ds.labels == c)
        rows = rows[rng.permutation(rows.size)]
        k = int(round(ratio * rows.size))
        first.extend(rows[:k])
        second.extend(rows[k:])
    return ds.subset(np.sort(first)), ds.subset(np.sort(second))


# ------------------------------------------------------------------ RNL1 IO

def save(ds: Dataset, path):
    kind = KINDS.index(ds.kind)
    n = len(ds)
    head = MAGIC + struct.pack("<III", kind, ds.class_count, n)
    head += struct.pack(f"<{len(ds.shape)}I", *ds.shape)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(ds.x.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u2").tobytes())


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 16:
        raise HeaderError(f"{path}: header truncated")
    kind, class_count, n = struct.unpack_from("<III", raw, 4)
    if kind >= len(KINDS) or class_count < 1:
        raise HeaderError(f"{path}: kind={kind} class_count={class_count}")
    rank = 1 if kind == 0 else 3
    off = 16 + 4 * rank
    if len(raw) < off:
        raise HeaderError(f"{path}: shape extents truncated")
    shape = struct.unpack_from(f"<{rank}I", raw, 16)
    if min(shape) < 1:
        raise HeaderError(f"{path}: zero extent in {shape}")
    count = n * int(np.prod(shape))
    want = off + 4 * count + 2 * n
    if len(raw) != want:
        raise LengthError(f"{path}: expected {want} bytes, found {len(raw)}")
    x = np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape((n, *shape))
    labels = np.frombuffer(raw, "<u2", n, off + 4 * count).astype(np.int64)
    if labels.size and labels.max() >= class_count:
        raise HeaderError(f"{path}: label exceeds class_count")
    return Dataset(KINDS[kind], shape, x, labels, class_count)


def export_csv(ds: Dataset, path):
    """One row per sample: label, then the flattened values."""
    flat = ds.flat()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"v{i}" for i in range(flat.shape[1])])
        for lab, row in zip(ds.labels, flat):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])
