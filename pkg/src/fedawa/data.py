"""Datasets, non-IID client partitioning and label histograms."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    pass


class PartitionError(DataError):
    """The requested split cannot be realized (e.g. too few samples)."""


class IdxParseError(DataError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise DataError("features must be a 2-D matrix")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if x.shape[0] < 1:
            raise DataError("dataset is empty")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        if y.min() < 0 or y.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(x).all():
            raise DataError("features contain non-finite values")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].class_count,
        )


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    indices: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.indices)

    def validate(self, n_total: int, min_samples: int = 1) -> None:
        idx = np.asarray(self.indices)
        if idx.size < min_samples:
            raise PartitionError(f"client {self.client_id} has {idx.size} < {min_samples} samples")
        if idx.size and (idx.min() < 0 or idx.max() >= n_total):
            raise PartitionError(f"client {self.client_id} indexes outside [0, {n_total})")
        if np.any(np.diff(idx) <= 0):
            raise PartitionError(f"client {self.client_id} indices not sorted and unique")


@dataclass(frozen=True)
class LabelHistogram:
    counts: tuple[int, ...]
    normalized: tuple[float, ...]

    @classmethod
    def from_counts(cls, counts) -> "LabelHistogram":
        c = [int(v) for v in counts]
        total = sum(c)
        if total <= 0:
            raise DataError("histogram of an empty sample")
        return cls(tuple(c), tuple(v / total for v in c))

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class DirichletSpec:
    alpha: float
    clients: int
    seed: int
    min_samples: int = 2
    max_retries: int = 50

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.clients < 1:
            raise ValueError("need at least one client")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


# --- synthetic data ------------------------------------------------------


def gen_blobs(
    classes: int,
    dims: int,
    n_per_class: int,
    spread: float,
    seed: int,
    sample_stream: int = 0,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class.

    Class means are unit random directions scaled by ``3 * spread`` and depend
    only on ``seed``; ``sample_stream`` selects an independent noise draw so a
    test split shares the means of its training split.
    """
    if classes < 2 or dims < 1 or n_per_class < 1:
        raise ValueError("gen_blobs needs classes >= 2, dims >= 1, n_per_class >= 1")
    mean_rng = np.random.default_rng([seed, 0])
    dirs = mean_rng.standard_normal((classes, dims))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = 3.0 * spread * dirs
    noise_rng = np.random.default_rng([seed, 1, sample_stream])
    noise = noise_rng.standard_normal((classes, n_per_class, dims))
    x = (means[:, None, :] + spread * noise).reshape(classes * n_per_class, dims)
    y = np.repeat(np.arange(classes), n_per_class)
    return Dataset(x, y, classes)


# --- partitioning ----------------------------------------------------------


def _dirichlet_draw(labels: np.ndarray, classes: int, k: int, alpha: float, rng) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(k)]
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(k, alpha))
        cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    return buckets


def _rebalance(buckets: list[list[int]], min_samples: int) -> None:
    # Move samples from the currently largest client to each deficient one.
    for b in buckets:
        while len(b) < min_samples:
            donor = max(range(len(buckets)), key=lambda i: (len(buckets[i]), -i))
            b.append(buckets[donor].pop())


def dirichlet_partition(labels, spec: DirichletSpec, classes: int | None = None) -> list[ClientPartition]:
    """Split sample indices across ``spec.clients`` clients with per-class Dir(alpha) shares."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = y.size
    k = spec.clients
    if n < k * spec.min_samples:
        raise PartitionError(
            f"{n} samples cannot give {k} clients at least {spec.min_samples} each"
        )
    c = int(classes if classes is not None else y.max() + 1)
    buckets = None
    for attempt in range(spec.max_retries):
        rng = np.random.default_rng([spec.seed, attempt])
        cand = _dirichlet_draw(y, c, k, spec.alpha, rng)
        if min(len(b) for b in cand) >= spec.min_samples:
            buckets = cand
            break
    if buckets is None:
        buckets = cand
        _rebalance(buckets, spec.min_samples)
    parts = [ClientPartition(i, tuple(sorted(b))) for i, b in enumerate(buckets)]
    for p in parts:
        p.validate(n, spec.min_samples)
    return parts


def extreme_groups(labels, classes: int, clients: int = 12, seed: int = 0) -> list[ClientPartition]:
    """Three equal-sized client groups: first half of the classes only, second
    half only, and all classes.

    Each class is shared 2:1 between its exclusive group and the mixed group,
    then dealt evenly across the clients of a group, so local sizes match up to
    rounding.
    """
    if clients % 3 or clients < 3:
        raise PartitionError("extreme_groups needs a positive multiple of 3 clients")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    g = clients // 3
    half = classes // 2
    rng = np.random.default_rng([seed, 7])
    buckets: list[list[int]] = [[] for _ in range(clients)]
    mixed = list(range(2 * g, 3 * g))
    for c in range(classes):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        own = list(range(0, g)) if c < half else list(range(g, 2 * g))
        n_own = (2 * idx.size) // 3
        for members, chunk in ((own, idx[:n_own]), (mixed, idx[n_own:])):
            # rotate the starting client so rounding leftovers spread out
            shift = c % len(members)
            order = members[shift:] + members[:shift]
            for client, piece in zip(order, np.array_split(chunk, len(members))):
                buckets[client].extend(piece.tolist())
    parts = [ClientPartition(i, tuple(sorted(b))) for i, b in enumerate(buckets)]
    for p in parts:
        p.validate(y.size, 1)
    return parts


def label_histogram(dataset: Dataset, partition: ClientPartition | None = None) -> LabelHistogram:
    y = dataset.labels if partition is None else dataset.labels[np.asarray(partition.indices, dtype=np.int64)]
    return LabelHistogram.from_counts(np.bincount(y, minlength=dataset.class_count))


def partition_manifest(dataset: Dataset, parts: Sequence[ClientPartition], seed: int, alpha: float | None) -> dict:
    return {
        "seed": seed,
        "alpha": alpha,
        "clients": [
            {"id": p.client_id, "n": p.n, "histogram": list(label_histogram(dataset, p).counts)}
            for p in parts
        ],
    }


# --- loaders ---------------------------------------------------------------

_IDX_TYPES = {
    0x08: ("u1", 1),
    0x09: ("i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}


def read_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file into an array of its declared shape."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IdxParseError("file shorter than the 4-byte magic", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise IdxParseError("magic must start with two zero bytes", 0)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise IdxParseError(f"unknown data type code 0x{code:02x}", 2)
    if ndim == 0:
        raise IdxParseError("zero dimensions", 3)
    head_end = 4 + 4 * ndim
    if len(buf) < head_end:
        raise IdxParseError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head_end])
    dtype, width = _IDX_TYPES[code]
    need = width * int(np.prod(dims, dtype=np.int64))
    if len(buf) - head_end < need:
        raise IdxParseError(f"expected {need} data bytes, file has {len(buf) - head_end}", len(buf))
    if len(buf) - head_end > need:
        raise IdxParseError("trailing bytes after data", head_end + need)
    return np.frombuffer(buf, dtype=dtype, count=need // width, offset=head_end).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, class_count: int | None = None) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise DataError("label file must be one-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    y = labels.astype(np.int64)
    c = int(class_count) if class_count is not None else int(y.max()) + 1
    return Dataset(x, y, c)


def load_csv(path: str | Path, class_count: int | None = None) -> Dataset:
    """CSV with a ``label,f0,f1,...`` header row."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}: header must start with 'label'")
        width = len(header) - 1
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise DataError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise DataError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    c = int(class_count) if class_count is not None else int(y.max()) + 1
    return Dataset(np.asarray(rows, dtype=np.float64).reshape(len(labels), width), y, c)
