"""Exhaustive descriptor search and Recall@N evaluation.

A query is localised at N when one of its top-N results lies within
``max_distance`` metres and, if both carry headings and the rule has an
angle limit, within ``max_angle`` degrees of heading. Queries with no
valid positive anywhere in the database are excluded from the denominator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .descriptor import Descriptor, Variant, similarity
from .errors import ContractError, ValidationError

EARTH_RADIUS_M = 6_371_000.0
_RESCORE_SLACK = 1e-9


@dataclass
class PlaceRecord:
    id: str
    lat: float
    lon: float
    descriptor: Descriptor
    heading: float | None = None

    def __post_init__(self):
        _check_coords(self.lat, self.lon)


@dataclass(frozen=True)
class MatchRule:
    max_distance: float = 25.0
    max_angle: float | None = 40.0

    def __post_init__(self):
        if not self.max_distance > 0:
            raise ValidationError(f"max_distance must be positive, got {self.max_distance}")


def _check_coords(lat, lon) -> None:
    lat, lon = np.asarray(lat), np.asarray(lon)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90):
        raise ValidationError(f"latitude out of range [-90, 90]: {lat}")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180):
        raise ValidationError(f"longitude out of range [-180, 180]: {lon}")


def haversine(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in metres between (lat, lon) pairs in degrees."""
    return float(haversine_many(a[0], a[1], np.asarray(b[0]), np.asarray(b[1])))


def haversine_many(lat1, lon1, lat2, lon2) -> np.ndarray:
    _check_coords(lat1, lon1)
    _check_coords(lat2, lon2)
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def angular_diff(h1, h2):
    """Absolute heading difference folded into [0, 180] degrees."""
    d = np.abs(np.asarray(h1, dtype=np.float64) - np.asarray(h2, dtype=np.float64)) % 360.0
    out = np.minimum(d, 360.0 - d)
    return float(out) if out.ndim == 0 else out


class DescriptorDB:
    """Immutable database of L2-normalised descriptors with geotags."""

    def __init__(self, records: Sequence[PlaceRecord]):
        if not records:
            raise ValidationError("database is empty")
        variants = {r.descriptor.variant for r in records}
        if len(variants) > 1:
            raise ContractError(f"database mixes descriptor variants: {sorted(v.value for v in variants)}")
        self.variant: Variant = variants.pop()
        self.records = list(records)
        self.ids = np.array([r.id for r in records])
        mat = np.stack([np.asarray(r.descriptor.values, dtype=np.float64) for r in records])
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        self.matrix = mat / np.where(norms == 0, 1.0, norms)
        self.lat = np.array([r.lat for r in records], dtype=np.float64)
        self.lon = np.array([r.lon for r in records], dtype=np.float64)
        self.heading = np.array([np.nan if r.heading is None else r.heading for r in records])
        # rank of each id in ascending order, for tie-breaking
        self._id_rank = np.empty(len(records), dtype=np.int64)
        self._id_rank[np.argsort(self.ids, kind="stable")] = np.arange(len(records))

    def __len__(self) -> int:
        return len(self.records)

    def _unit(self, query: Descriptor) -> np.ndarray:
        if query.variant != self.variant:
            raise ContractError(f"query variant {query.variant.value} does not match database {self.variant.value}")
        q = np.asarray(query.values, dtype=np.float64)
        if q.shape != (self.matrix.shape[1],):
            raise ContractError(f"query dim {q.shape} does not match database dim {self.matrix.shape[1]}")
        n = np.linalg.norm(q)
        return q / n if n > 0 else q

    def scores(self, query: Descriptor) -> np.ndarray:
        return self.matrix @ self._unit(query)

    def search(self, query: Descriptor, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and scores of the top ``n`` entries; ties by ascending id."""
        if n < 1:
            raise ValidationError(f"n must be >= 1, got {n}")
        s = self.scores(query)
        n = min(n, len(s))
        if n < len(s):
            # BLAS rounding can split exact ties, so keep a margin below the n-th score
            kth = np.partition(s, len(s) - n)[len(s) - n]
            cand = np.flatnonzero(s >= kth - _RESCORE_SLACK)
        else:
            cand = np.arange(len(s))
        # final scores come from the same scalar path as the reference scan
        exact = np.array([similarity(query, self.records[i].descriptor) for i in cand])
        order = np.lexsort((self._id_rank[cand], -exact))[:n]
        return cand[order], exact[order]


def top_n(query: Descriptor, db: Sequence[PlaceRecord] | DescriptorDB, n: int) -> list[tuple[str, float]]:
    db = db if isinstance(db, DescriptorDB) else DescriptorDB(db)
    idx, scores = db.search(query, n)
    return [(str(db.ids[i]), float(s)) for i, s in zip(idx, scores)]


def top_n_exhaustive(query: Descriptor, db: Sequence[PlaceRecord], n: int) -> list[tuple[str, float]]:
    """Reference path: score every record one at a time and fully sort."""
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    for r in db:
        if r.descriptor.variant != query.variant:
            raise ContractError(f"record {r.id!r} has variant {r.descriptor.variant.value}, query {query.variant.value}")
    scored = [(r.id, similarity(query, r.descriptor)) for r in db]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:n]


@dataclass
class QueryResult:
    id: str
    top_ids: list[str]
    correct: list[bool]
    n_positives: int


@dataclass
class RecallReport:
    recalls: dict[int, float]
    rule: MatchRule
    per_query: list[QueryResult] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)
    n_queries: int = 0
    n_evaluated: int = 0
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "recalls": {str(k): v for k, v in self.recalls.items()},
            "rule": asdict(self.rule),
            "n_queries": self.n_queries,
            "n_evaluated": self.n_evaluated,
            "excluded": self.excluded,
            "per_query": [asdict(q) for q in self.per_query],
            **({"meta": self.meta} if self.meta else {}),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RecallReport":
        rule = MatchRule(**obj["rule"])
        per_query = [QueryResult(**q) for q in obj.get("per_query", [])]
        recalls = {int(k): float(v) for k, v in obj["recalls"].items()}
        return cls(recalls, rule, per_query, list(obj.get("excluded", [])),
                   int(obj["n_queries"]), int(obj["n_evaluated"]), obj.get("meta", {}))

    def to_tsv(self) -> str:
        return "".join(f"{n}\t{r:.4f}\n" for n, r in self.recalls.items())


def positives_mask(query: PlaceRecord, db: DescriptorDB, rule: MatchRule) -> np.ndarray:
    dist = haversine_many(query.lat, query.lon, db.lat, db.lon)
    ok = dist <= rule.max_distance
    if rule.max_angle is not None and query.heading is not None:
        has = ~np.isnan(db.heading)
        within = np.zeros(len(db), dtype=bool)
        within[has] = angular_diff(query.heading, db.heading[has]) <= rule.max_angle
        ok &= ~has | within
    return ok


def recall_at_n(queries: Sequence[PlaceRecord], db: Sequence[PlaceRecord] | DescriptorDB,
                rule: MatchRule = MatchRule(), Ns: Sequence[int] = (1, 5, 10)) -> RecallReport:
    if not queries:
        raise ValidationError("query set is empty")
    Ns = [int(n) for n in Ns]
    if not Ns or any(n < 1 for n in Ns) or Ns != sorted(Ns):
        raise ValidationError(f"Ns must be positive and ascending, got {Ns}")
    db = db if isinstance(db, DescriptorDB) else DescriptorDB(db)
    hits = np.zeros(len(Ns))
    per_query, excluded = [], []
    for q in queries:
        pos = positives_mask(q, db, rule)
        if not pos.any():
            excluded.append(q.id)
            continue
        idx, _ = db.search(q.descriptor, Ns[-1])
        correct = pos[idx]
        for j, n in enumerate(Ns):
            hits[j] += bool(correct[:n].any())
        per_query.append(QueryResult(q.id, [str(db.ids[i]) for i in idx], [bool(c) for c in correct], int(pos.sum())))
    evaluated = len(per_query)
    recalls = {n: (float(h / evaluated) if evaluated else math.nan) for n, h in zip(Ns, hits)}
    report = RecallReport(recalls, rule, per_query, excluded, len(queries), evaluated)
    values = list(recalls.values())
    assert all(a <= b for a, b in zip(values, values[1:])), "recall must be nondecreasing in N"
    return report
