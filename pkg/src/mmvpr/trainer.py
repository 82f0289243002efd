"""Deterministic desk-scale trainer for the recalibration and fusion weights.

Weights file layout (little-endian)::

    b"MMWT", version u32 = 1, entry count u32
    per entry: name length u32, name bytes, rank u32, dims u32 * rank,
               float32 payload (row-major)
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .errors import DataError, EvaluationError, FormatError, LengthError
from .metric import ms_loss, sample_batch
from .model import FusionModel, init_params
from .scenarios import build_split
from .seqcore import ParamStore

WEIGHTS_MAGIC = b"MMWT"
WEIGHTS_VERSION = 1


@dataclass
class TokenPool:
    """Training records (anything with ``.id`` and ``.place``) and their tokens."""

    records: Sequence
    X: np.ndarray
    Y: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {r.id: i for i, r in enumerate(self.records)}
        if len(self._index) != len(self.records):
            raise DataError("duplicate record ids in training pool")

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self._index[i] for i in ids])

    @classmethod
    def from_samples(cls, samples) -> "TokenPool":
        return cls(list(samples), np.stack([s.X for s in samples]), np.stack([s.Y for s in samples]))


class AdamW:
    """Adaptive-moment update with decoupled weight decay on matrices only."""

    def __init__(self, store: ParamStore, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.store = store
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.names = store.names(trainable_only=True)
        self.m = {n: np.zeros_like(store[n]) for n in self.names}
        self.v = {n: np.zeros_like(store[n]) for n in self.names}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for n in self.names:
            w, g = self.store[n], self.store.grad(n)
            self.m[n] = self.b1 * self.m[n] + (1 - self.b1) * g
            self.v[n] = self.b2 * self.v[n] + (1 - self.b2) * g * g
            if self.weight_decay and w.ndim == 2:
                w -= lr * self.weight_decay * w
            w -= lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)


class SGD:
    def __init__(self, store: ParamStore):
        self.store = store
        self.names = store.names(trainable_only=True)

    def step(self, lr: float) -> None:
        for n in self.names:
            self.store[n] -= lr * self.store.grad(n)


def lr_at(step: int, steps: int, lr: float, final_fraction: float) -> float:
    """Linear decay from ``lr`` to ``final_fraction * lr`` over the run."""
    if steps <= 1:
        return lr
    return lr * (1.0 - (1.0 - final_fraction) * step / (steps - 1))


@dataclass
class TrainResult:
    store: ParamStore
    trace: list[tuple[int, float, float]]


def train_toy(config: RunConfig, pool: TokenPool | None = None, store: ParamStore | None = None) -> TrainResult:
    """Run ``config.train.steps`` metric-learning steps; fully determined by ``config.seed``."""
    t = config.train
    if pool is None:
        pool = TokenPool.from_samples(build_split(config, "train", config.scenario.train_per_place))
    store = init_params(config) if store is None else store
    model = FusionModel(config, store)
    opt = AdamW(store, t.betas, weight_decay=t.weight_decay) if t.optimizer == "adamw" else SGD(store)
    hyper = config.ms_hyper
    places = np.array([str(r.place) for r in pool.records])
    trace = []
    for step in range(t.steps):
        lr = lr_at(step, t.steps, t.lr, t.lr_final_fraction)
        rows = pool.rows(sample_batch(pool.records, t.P, t.K, seed=[config.seed, step]))
        desc, cache = model.forward(pool.X[rows], pool.Y[rows])
        loss, grad = ms_loss(desc, places[rows], hyper)
        if not math.isfinite(loss):
            raise EvaluationError(f"non-finite loss at step {step}")
        store.zero_grad()
        model.backward(grad, cache)
        opt.step(lr)
        trace.append((step, loss, lr))
    store.zero_grad()
    return TrainResult(store, trace)


def write_trace(path, trace) -> None:
    lines = ["step,loss,lr"] + [f"{s},{loss!r},{lr!r}" for s, loss, lr in trace]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------ weights io

def save_weights(path, store: ParamStore) -> None:
    names = list(store)
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(names))]
    for name in names:
        value = store[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, into: ParamStore | None = None) -> ParamStore:
    """Read a weights file; with ``into`` given, overwrite matching entries in place."""
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    store = ParamStore() if into is None else into
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != WEIGHTS_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        pos = 12
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise LengthError(f"{path}: truncated payload for {name!r}")
            value = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float64)
            pos += size
            if into is None:
                store.add(name, value)
            elif name in store:
                store[name] = value
            else:
                raise FormatError(f"{path}: entry {name!r} not expected by the configured model")
    except struct.error as exc:
        raise LengthError(f"{path}: truncated weights file ({exc})") from exc
    return store


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
