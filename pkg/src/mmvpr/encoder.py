"""Token ingestion: token files, multi-level summation, synthetic encoders.

Token file layout (all little-endian)::

    bytes 0-3    b"MMTK"
    bytes 4-7    version (u32) = 1
    bytes 8-11   T (u32)
    bytes 12-15  D (u32)
    then T*D float32, row-major, row 0 = CLS

The synthetic encoder draws every random number from SplitMix64 in
counter mode: draw ``i`` of a stream seeded with ``s`` is
``mix64(s + (i + 1) * 0x9E3779B97F4A7C15)``, where ``mix64`` is the
SplitMix64 finaliser (xor-shift 30/27/31 with multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Uniforms take the top 53
bits; Gaussians use Box-Muller on consecutive uniform pairs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, FormatError, LengthError
from .seqcore import TokenSequence, as_array

TOKEN_MAGIC = b"MMTK"
TOKEN_VERSION = 1
_HEADER = struct.Struct("<4sIII")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def fuse_levels(levels: Sequence[TokenSequence]) -> TokenSequence:
    """Elementwise sum of same-shaped token sequences (CLS rows included)."""
    if len(levels) == 0:
        raise DimensionError("fuse_levels needs at least one level")
    arrays = [as_array(lv) for lv in levels]
    shape = arrays[0].shape
    for i, arr in enumerate(arrays[1:], start=1):
        if arr.shape != shape:
            raise DimensionError(f"level {i} has shape {arr.shape}, expected {shape} (level 0)")
    total = np.array(arrays[0], dtype=np.float64)
    for arr in arrays[1:]:
        total = total + arr
    return TokenSequence(total)


def save_tokens(path, seq) -> None:
    arr = as_array(seq)
    if arr.ndim != 2:
        raise DimensionError(f"expected a T x D matrix, got shape {arr.shape}")
    T, D = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TOKEN_MAGIC, TOKEN_VERSION, T, D))
        fh.write(payload)


def load_tokens(path) -> TokenSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise LengthError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, T, D = _HEADER.unpack_from(data)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TOKEN_MAGIC!r}")
    if version != TOKEN_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if T < 1 or D < 1:
        raise FormatError(f"{path}: header declares T={T}, D={D}")
    expected = T * D * 4
    got = len(data) - _HEADER.size
    if got != expected:
        raise LengthError(f"{path}: payload has {got} bytes, header T={T} D={D} needs {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(T, D).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains non-finite values")
    return TokenSequence(arr)


# ------------------------------------------------------------- SplitMix64

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """``count`` raw 64-bit outputs of the stream seeded with ``seed``."""
    counters = np.arange(offset + 1, offset + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix64(np.uint64(seed & _MASK64) + counters * _GOLDEN)


def derive_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed via repeated mixing."""
    state = np.uint64(0x6A09E667F3BCC909)
    with np.errstate(over="ignore"):
        for p in parts:
            state = _mix64(np.array([state ^ np.uint64(p & _MASK64)], dtype=np.uint64))[0] + _GOLDEN
    return int(state)


def uniform(seed: int, count: int) -> np.ndarray:
    """Uniform doubles in (0, 1]."""
    bits = splitmix64(seed, count) >> np.uint64(11)
    return (bits.astype(np.float64) + 1.0) * (1.0 / (1 << 53))


def gaussian(seed: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u = uniform(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(shape)


# ------------------------------------------------------ synthetic scenes

_IMAGE_STREAM = 0x494D47
_TEXT_STREAM = 0x545854
_NOISE_STREAM = 0x4E5345


@dataclass(frozen=True)
class SceneSpec:
    place_id: int
    image_archetype: int
    text_archetype: int
    noise_scale: float = 0.05
    grid_h: int = 4
    grid_w: int = 4
    dim: int = 16
    text_len: int = 8

    @property
    def M(self) -> int:
        return self.grid_h * self.grid_w + 1


def archetype_center(kind: str, archetype: int, T: int, D: int) -> np.ndarray:
    stream = _IMAGE_STREAM if kind == "image" else _TEXT_STREAM
    return gaussian(derive_seed(stream, archetype, T, D), (T, D))


def synth_encode(spec: SceneSpec, seed: int) -> tuple[TokenSequence, TokenSequence]:
    """Archetype centre plus seeded Gaussian noise for both modalities."""
    if spec.noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    M, N, D = spec.M, spec.text_len, spec.dim
    image = archetype_center("image", spec.image_archetype, M, D)
    text = archetype_center("text", spec.text_archetype, N, D)
    if spec.noise_scale > 0:
        image = image + spec.noise_scale * gaussian(derive_seed(_NOISE_STREAM, seed, spec.place_id, 0), (M, D))
        text = text + spec.noise_scale * gaussian(derive_seed(_NOISE_STREAM, seed, spec.place_id, 1), (N, D))
    return TokenSequence(image), TokenSequence(text)


# --------------------------------------------------------------- manifest

@dataclass
class ManifestRecord:
    id: str
    image_tokens: str | list[str]
    lat: float
    lon: float
    split: str
    text_tokens: str | None = None
    heading: float | None = None
    place: str | None = None
    extra: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        out = {"id": self.id, "image_tokens": self.image_tokens}
        if self.text_tokens is not None:
            out["text_tokens"] = self.text_tokens
        out["lat"] = self.lat
        out["lon"] = self.lon
        if self.heading is not None:
            out["heading"] = self.heading
        out["split"] = self.split
        if self.place is not None:
            out["place"] = self.place
        out.update(self.extra)
        return out


_SPLITS = ("query", "database", "train")
_KNOWN_KEYS = {"id", "image_tokens", "text_tokens", "lat", "lon", "heading", "split", "place"}


def load_manifest(path) -> list[ManifestRecord]:
    """Read a JSON-array manifest; relative token paths resolve against its folder."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    base = path.parent
    records = []
    for i, item in enumerate(raw):
        try:
            rid = str(item["id"])
            lat, lon = float(item["lat"]), float(item["lon"])
            image = item["image_tokens"]
            split = item["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: record {i} is missing or has a malformed field ({exc})") from exc
        if split not in _SPLITS:
            raise DataError(f"{path}: record {rid!r} has unknown split {split!r}")

        def resolve(p):
            return str(p if Path(p).is_absolute() else base / p)

        image = [resolve(p) for p in image] if isinstance(image, list) else resolve(image)
        text = item.get("text_tokens")
        heading = item.get("heading")
        place = item.get("place")
        records.append(ManifestRecord(
            id=rid, image_tokens=image, lat=lat, lon=lon, split=split,
            text_tokens=resolve(text) if text is not None else None,
            heading=float(heading) if heading is not None else None,
            place=str(place) if place is not None else None,
            extra={k: v for k, v in item.items() if k not in _KNOWN_KEYS},
        ))
    return records


def save_manifest(path, records: Sequence[ManifestRecord]) -> None:
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=1))


def load_record_tokens(record: ManifestRecord) -> tuple[TokenSequence, TokenSequence | None]:
    """Image tokens (summed when several levels are listed) and optional text tokens."""
    if isinstance(record.image_tokens, list):
        image = fuse_levels([load_tokens(p) for p in record.image_tokens])
    else:
        image = load_tokens(record.image_tokens)
    text = load_tokens(record.text_tokens) if record.text_tokens else None
    return image, text
