"""Flat parameter vectors with a named layer layout.

Every model in the simulator is handled as a single float64 vector. The
layout records which contiguous segment belongs to which weight matrix or
bias so layer-wise aggregation can slice it without knowing the network.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_MAGIC = b"FAWAPV01"
_EPS_NORM = 1e-12


class LayoutError(ValueError):
    """Two vectors (or a vector and a layout) do not line up."""


@dataclass(frozen=True)
class LayerEntry:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class LayerLayout:
    entries: tuple[LayerEntry, ...]
    total_len: int

    def __post_init__(self) -> None:
        if not self.entries:
            raise LayoutError("layout needs at least one entry")
        expected = 0
        for entry in self.entries:
            if entry.offset != expected:
                raise LayoutError(
                    f"entry {entry.name!r} starts at {entry.offset}, expected {expected}"
                )
            if entry.length <= 0:
                raise LayoutError(f"entry {entry.name!r} has non-positive length")
            expected += entry.length
        if expected != self.total_len or self.total_len <= 0:
            raise LayoutError(f"lengths sum to {expected}, total_len is {self.total_len}")

    @classmethod
    def from_sizes(cls, sizes: Iterable[tuple[str, int]]) -> "LayerLayout":
        entries = []
        offset = 0
        for name, length in sizes:
            entries.append(LayerEntry(name, offset, int(length)))
            offset += int(length)
        return cls(tuple(entries), offset)

    @classmethod
    def single(cls, length: int, name: str = "v") -> "LayerLayout":
        return cls.from_sizes([(name, length)])

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[dict]:
        return [{"name": e.name, "offset": e.offset, "length": e.length} for e in self.entries]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "LayerLayout":
        entries = tuple(LayerEntry(str(d["name"]), int(d["offset"]), int(d["length"])) for d in items)
        total = sum(e.length for e in entries)
        return cls(entries, total)


class ParamVector:
    """Immutable float64 vector tied to a :class:`LayerLayout`."""

    __slots__ = ("_values", "layout")

    def __init__(self, values, layout: LayerLayout | None = None, *, copy: bool = True):
        arr = np.array(values, dtype=np.float64, copy=copy).reshape(-1)
        if layout is None:
            layout = LayerLayout.single(arr.size)
        if arr.size != layout.total_len:
            raise LayoutError(f"{arr.size} values for a layout of length {layout.total_len}")
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FloatingPointError(f"non-finite parameter at index {bad}")
        arr.flags.writeable = False
        self._values = arr
        self.layout = layout

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self._values.size

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self)}, layers={len(self.layout)})"

    def to_numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._values.copy()

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_same(self, other)
        return ParamVector(self._values + other._values, self.layout, copy=False)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_same(self, other)
        return ParamVector(self._values - other._values, self.layout, copy=False)

    def scale(self, alpha: float) -> "ParamVector":
        return ParamVector(alpha * self._values, self.layout, copy=False)

    def identical(self, other: "ParamVector") -> bool:
        """Bitwise equality of values and layout."""
        return self.layout == other.layout and np.array_equal(self._values, other._values)

    @classmethod
    def zeros(cls, layout: LayerLayout) -> "ParamVector":
        return cls(np.zeros(layout.total_len), layout, copy=False)


@dataclass(frozen=True)
class ClientVector:
    """Update delta of one client in one round (local model minus broadcast model)."""

    delta: ParamVector
    client_id: int
    round: int

    def __post_init__(self) -> None:
        if self.round < 1:
            raise ValueError("round numbers start at 1")


def _check_same(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise LayoutError("parameter vectors have different layouts")


def _exact_sum(x: np.ndarray) -> float:
    # fsum is correctly rounded, so the result does not depend on any
    # reduction order or thread count.
    return math.fsum(x.tolist())


def dot(a: ParamVector, b: ParamVector) -> float:
    _check_same(a, b)
    return _exact_sum(a.values * b.values)


def l2_norm(a: ParamVector) -> float:
    return math.sqrt(_exact_sum(a.values * a.values))


def cosine_similarity(a: ParamVector, b: ParamVector) -> float:
    """Cosine of the angle between ``a`` and ``b``; 0 if either is (near) zero."""
    _check_same(a, b)
    aa, bb = dot(a, a), dot(b, b)
    if math.sqrt(aa) < _EPS_NORM or math.sqrt(bb) < _EPS_NORM:
        return 0.0
    # sqrt(aa * bb) rather than |a| * |b|: exact for a == b, so cos(v, v) == 1
    denom = math.sqrt(aa * bb)
    if not math.isfinite(denom) or denom == 0.0:
        denom = math.sqrt(aa) * math.sqrt(bb)
    c = dot(a, b) / denom
    return min(1.0, max(-1.0, c))


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    _check_same(x, y)
    return ParamVector(alpha * x.values + y.values, x.layout, copy=False)


def layer_slice(v: ParamVector, l: int) -> np.ndarray:
    """Read-only view of layer ``l``."""
    if not 0 <= l < len(v.layout.entries):
        raise IndexError(f"layer {l} out of range for {len(v.layout.entries)} layers")
    e = v.layout.entries[l]
    return v.values[e.offset : e.offset + e.length]


def stack(vectors: Sequence[ParamVector]) -> np.ndarray:
    """K x P matrix of the given vectors; all layouts must match."""
    if not vectors:
        raise ValueError("need at least one vector")
    for v in vectors[1:]:
        _check_same(vectors[0], v)
    return np.stack([v.values for v in vectors])


# --- serialization -------------------------------------------------------
#
# File layout: 8-byte magic, uint64 LE header length, UTF-8 JSON header
# ({"layout": [...], "dtype": "<f8"}), then the raw little-endian float64s.


def to_bytes(v: ParamVector) -> bytes:
    header = json.dumps({"dtype": "<f8", "layout": v.layout.to_json()}, sort_keys=True).encode()
    return _MAGIC + struct.pack("<Q", len(header)) + header + v.values.astype("<f8").tobytes()


def from_bytes(buf: bytes) -> ParamVector:
    if len(buf) < 16 or buf[:8] != _MAGIC:
        raise ValueError("not a parameter-vector file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen > len(buf):
        raise ValueError("truncated header")
    header = json.loads(buf[16 : 16 + hlen].decode())
    layout = LayerLayout.from_json(header["layout"])
    body = buf[16 + hlen :]
    if len(body) != 8 * layout.total_len:
        raise ValueError(f"expected {8 * layout.total_len} payload bytes, found {len(body)}")
    return ParamVector(np.frombuffer(body, dtype="<f8"), layout)


def save(v: ParamVector, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(v))


def load(path: str | Path) -> ParamVector:
    return from_bytes(Path(path).read_bytes())
