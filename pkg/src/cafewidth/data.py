"""Dataset ingestion, synthetic generators and stratified splitting.

Binary image format (little-endian)::

    b"CAFD1"
    u32 count, u16 H, u16 W, u16 C, u16 num_classes
    count x { u16 label, float32[C*H*W] pixels (C, H, W order) }
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .nnkernel import Batch

MAGIC = b"CAFD1"
_HEADER = struct.Struct("<IHHHH")
SPLIT_RATIOS = (0.64, 0.16, 0.20)


@dataclass
class Splits:
    train: Batch
    val: Batch
    test: Batch
    num_classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.train.inputs.shape[1:])


# --- synthetic ---------------------------------------------------------------


def gaussian_blobs(n: int, k: int = 3, d: int = 2, seed: int = 0, spread: float = 3.0) -> Batch:
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(k, d))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    x = centers[labels] + rng.normal(size=(n, d))
    return Batch(x, labels)


def striped_patches(
    n: int,
    seed: int = 0,
    size: int = 8,
    num_classes: int = 10,
    noise: float = 0.8,
    period: float = 4.0,
) -> Batch:
    """Sinusoidal gratings; the class sets the stripe orientation.

    Orientations are spaced ``pi / num_classes`` apart, phase and contrast
    are random, and Gaussian pixel noise makes neighbouring classes
    confusable.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    theta = labels * np.pi / num_classes
    phase = rng.uniform(0, 2 * np.pi, size=n)
    contrast = rng.uniform(0.6, 1.2, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
    img = contrast[:, None, None] * np.sin(2 * np.pi * proj / period + phase[:, None, None])
    img += rng.normal(scale=noise, size=img.shape)
    return Batch(img[:, None, :, :], labels)


SYNTHETIC = {"gaussian-blobs": gaussian_blobs, "striped-patches": striped_patches}


# --- files -------------------------------------------------------------------


def write_binary(data: Batch, num_classes: int, path: str | Path) -> None:
    N, C, H, W = data.inputs.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(N, H, W, C, num_classes))
        px = data.inputs.astype("<f4").reshape(N, -1)
        for label, row in zip(data.labels, px):
            fh.write(struct.pack("<H", int(label)))
            fh.write(row.tobytes())


def read_binary(path: str | Path) -> tuple[Batch, int]:
    raw = Path(path).read_bytes()
    if raw[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}")
    start = len(MAGIC) + _HEADER.size
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    N, H, W, C, k = _HEADER.unpack_from(raw, len(MAGIC))
    rec = 2 + 4 * C * H * W
    body = raw[start:]
    if len(body) < N * rec:
        raise FormatError(f"{path}: truncated, expected {N} records")
    dt = np.dtype([("label", "<u2"), ("px", "<f4", (C, H, W))])
    arr = np.frombuffer(body[: N * rec], dtype=dt, count=N)
    labels = arr["label"].astype(np.int64)
    if N and labels.max() >= k:
        raise FormatError(f"{path}: label {labels.max()} out of range for {k} classes")
    return Batch(arr["px"].astype(np.float64), labels), k


def read_csv(path: str | Path) -> tuple[Batch, int]:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue  # header
                raise FormatError(f"{path}: non-numeric value on line {i + 1}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    arr = np.asarray(rows)
    labels = arr[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise FormatError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.int64)
    return Batch(arr[:, :-1], labels), int(labels.max()) + 1


# --- splitting ---------------------------------------------------------------


def _stratified_take(labels: np.ndarray, pool: np.ndarray, k: int, rng) -> np.ndarray:
    """Pick ``k`` indices from ``pool`` keeping class proportions (largest remainder)."""
    classes, counts = np.unique(labels[pool], return_counts=True)
    exact = counts * k / len(pool)
    quota = np.floor(exact).astype(int)
    order = sorted(range(len(classes)), key=lambda i: (-(exact[i] - quota[i]), classes[i]))
    for i in order[: k - quota.sum()]:
        quota[i] += 1
    picked = []
    for c, q in zip(classes, quota):
        members = pool[labels[pool] == c]
        picked.append(rng.permutation(members)[:q])
    return np.sort(np.concatenate(picked)) if picked else np.array([], dtype=int)


def split(data: Batch, num_classes: int, seed: int = 0, ratios=SPLIT_RATIOS) -> Splits:
    n = len(data)
    n_test = int(round(ratios[2] * n))
    n_val = int(round(ratios[1] * n))
    if n - n_test - n_val < 1 or n_val < 1 or n_test < 1:
        raise FormatError(f"dataset of {n} samples is too small for a train/val/test split")
    if data.labels.min() < 0 or data.labels.max() >= num_classes:
        raise FormatError("label out of range")
    rng = np.random.default_rng(seed)
    everything = np.arange(n)
    test = _stratified_take(data.labels, everything, n_test, rng)
    rest = np.setdiff1d(everything, test)
    val = _stratified_take(data.labels, rest, n_val, rng)
    train = np.setdiff1d(rest, val)
    return Splits(data.take(train), data.take(val), data.take(test), num_classes)


def load_dataset(source: str | Path | dict, seed: int = 0) -> Splits:
    """Load and split a dataset.

    ``source`` is a path (``.csv`` or CAFD1 binary) or a synthetic dataset description
    such as ``{"synthetic": "striped-patches", "n": 2000}``.
    """
    if isinstance(source, dict):
        options = dict(source)
        name = options.pop("synthetic", None)
        if name not in SYNTHETIC:
            raise FormatError(f"unknown synthetic dataset {name!r}")
        gen_seed = options.pop("seed", seed)
        data = SYNTHETIC[name](seed=gen_seed, **options)
        k = options.get("k", 3) if name == "gaussian-blobs" else options.get("num_classes", 10)
        return split(data, k, seed)
    path = Path(source)
    if not path.exists():
        raise FormatError(f"dataset {path} does not exist")
    if path.suffix.lower() == ".csv":
        data, k = read_csv(path)
    else:
        data, k = read_binary(path)
    return split(data, k, seed)
