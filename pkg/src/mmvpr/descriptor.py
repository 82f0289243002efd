"""Retrieval descriptor composition, cosine similarity, descriptor store files.

Store layout (little-endian)::

    b"MMDS", version u32 = 1, count u32, dim u32
    per record: id length u32, id bytes (utf-8), lat f64, lon f64,
                heading f64 (NaN when absent), dim float32 values
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cammf import AgentSet
from .errors import DimensionError, FormatError, LengthError

STORE_MAGIC = b"MMDS"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_GEO = struct.Struct("<ddd")


class Variant(str, enum.Enum):
    FULL = "FULL"
    IM_CLS_AVG = "IM_CLS_AVG"
    TX_CLS = "TX_CLS"

    @property
    def branches(self) -> tuple[str, ...]:
        return {"FULL": ("m", "a", "t"), "IM_CLS_AVG": ("m", "a"), "TX_CLS": ("t",)}[self.value]

    def dim(self, D: int) -> int:
        return len(self.branches) * D


@dataclass
class Descriptor:
    values: np.ndarray
    variant: Variant
    normalized: bool

    def __len__(self) -> int:
        return self.values.shape[-1]


def _l2_normalize(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, 1e-12), norm


def compose(agents: AgentSet, variant: Variant | str = Variant.FULL, normalize: bool = True,
            per_segment: bool = False) -> Descriptor:
    """Concatenate the selected agents; optionally L2-normalise the result.

    ``per_segment`` normalises each agent before concatenating instead.
    """
    variant = Variant(variant)
    parts = [np.asarray(agents[b], dtype=np.float64) for b in variant.branches]
    if normalize and per_segment:
        parts = [_l2_normalize(p)[0] for p in parts]
    values = np.concatenate(parts, axis=-1)
    if normalize and not per_segment:
        values = _l2_normalize(values)[0]
    return Descriptor(values, variant, normalize)


def compose_backward(d_values: np.ndarray, agents: AgentSet, variant: Variant | str, normalize: bool = True,
                     per_segment: bool = False) -> AgentSet:
    """Gradient of the descriptor back onto the agents (unused ones get zeros)."""
    variant = Variant(variant)
    parts = {b: np.asarray(agents[b], dtype=np.float64) for b in variant.branches}
    D = next(iter(parts.values())).shape[-1]

    def norm_backward(dy, x):
        y, n = _l2_normalize(x)
        return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / np.maximum(n, 1e-12)

    if normalize and not per_segment:
        d_values = norm_backward(d_values, np.concatenate(list(parts.values()), axis=-1))
    out = {b: np.zeros_like(agents.z_m) for b in ("m", "a", "t")}
    for i, b in enumerate(variant.branches):
        seg = d_values[..., i * D:(i + 1) * D]
        out[b] = norm_backward(seg, parts[b]) if normalize and per_segment else seg
    return AgentSet(out["m"], out["a"], out["t"])


def similarity(a, b) -> float:
    """Cosine similarity of two descriptors (or plain vectors)."""
    va = np.asarray(a.values if isinstance(a, Descriptor) else a, dtype=np.float64)
    vb = np.asarray(b.values if isinstance(b, Descriptor) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionError(f"descriptor lengths differ: {va.shape} vs {vb.shape}")
    if isinstance(a, Descriptor) and isinstance(b, Descriptor) and a.variant != b.variant:
        raise DimensionError(f"descriptor variants differ: {a.variant.value} vs {b.variant.value}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(np.dot(va / na, vb / nb), -1.0, 1.0))


# ------------------------------------------------------------ store files

@dataclass
class StoredDescriptor:
    id: str
    lat: float
    lon: float
    heading: float | None
    values: np.ndarray


def save_store(path, records: Sequence[StoredDescriptor]) -> None:
    dims = {np.asarray(r.values).shape[-1] for r in records}
    if len(dims) > 1:
        raise DimensionError(f"mixed descriptor dims in one store: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    chunks = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, len(records), dim)]
    for r in records:
        rid = r.id.encode("utf-8")
        heading = math.nan if r.heading is None else r.heading
        chunks.append(struct.pack("<I", len(rid)) + rid)
        chunks.append(_GEO.pack(r.lat, r.lon, heading))
        chunks.append(np.ascontiguousarray(r.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_store(path) -> tuple[int, list[StoredDescriptor]]:
    """Returns (dim, records)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise LengthError(f"{path}: file shorter than header")
    magic, version, count, dim = _HEADER.unpack_from(data)
    if magic != STORE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STORE_MAGIC!r}")
    if version != STORE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    records = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise LengthError(f"{path}: truncated record id")
            rid = data[pos:pos + n].decode("utf-8")
            pos += n
            lat, lon, heading = _GEO.unpack_from(data, pos)
            pos += _GEO.size
            if pos + 4 * dim > len(data):
                raise LengthError(f"{path}: truncated descriptor for {rid!r}")
            values = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
            records.append(StoredDescriptor(rid, lat, lon, None if math.isnan(heading) else heading, values))
    except struct.error as exc:
        raise LengthError(f"{path}: truncated store ({exc})") from exc
    if pos != len(data):
        raise LengthError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return dim, records
