"""Multi-Similarity loss with pair mining, and the P x K place sampler."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError


@dataclass(frozen=True)
class MSHyper:
    alpha: float = 1.0
    beta: float = 50.0
    lambda_threshold: float = 0.5
    mining_margin: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.mining_margin < 0:
            raise ValueError("mining_margin must be non-negative")


def mine_pairs(sim: np.ndarray, labels: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (B, B) masks of mined positive and negative pairs per anchor.

    A positive survives when it is less similar than the hardest negative
    plus the margin; a negative survives when it is more similar than the
    hardest positive minus the margin. An anchor lacking either kind mines
    nothing of the other.
    """
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1, keepdims=True)
    hardest_pos = np.where(pos, sim, np.inf).min(axis=1, keepdims=True)
    return pos & (sim < hardest_neg + margin), neg & (sim > hardest_pos - margin)


def ms_loss(descriptors: np.ndarray, labels, hyper: MSHyper = MSHyper()) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. the (already L2-normalised) descriptor rows."""
    F = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    if F.ndim != 2 or len(labels) != F.shape[0]:
        raise ContractError(f"descriptors {F.shape} and labels {labels.shape} do not form a batch")
    norms = np.linalg.norm(F, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ContractError(f"descriptor rows must be L2-normalised (norms span {norms.min():.4f}..{norms.max():.4f})")
    if len(np.unique(labels)) < 2:
        raise ContractError("batch needs at least two distinct labels")
    B = F.shape[0]
    a, b, lam = hyper.alpha, hyper.beta, hyper.lambda_threshold
    sim = F @ F.T
    pos, neg = mine_pairs(sim, labels, hyper.mining_margin)
    exp_pos = np.where(pos, np.exp(-a * (sim - lam)), 0.0)
    exp_neg = np.where(neg, np.exp(b * (sim - lam)), 0.0)
    sum_pos = exp_pos.sum(axis=1, keepdims=True)
    sum_neg = exp_neg.sum(axis=1, keepdims=True)
    loss = float(np.sum(np.log1p(sum_pos) / a + np.log1p(sum_neg) / b) / B)
    dsim = (-exp_pos / (1.0 + sum_pos) + exp_neg / (1.0 + sum_neg)) / B
    grad = (dsim + dsim.T) @ F
    return loss, grad


def mining_margin_gap(descriptors: np.ndarray, labels, hyper: MSHyper = MSHyper()) -> float:
    """Distance of the closest pair similarity to a mining threshold.

    Finite-difference checks are only meaningful when this is comfortably
    larger than the perturbation size.
    """
    F = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    sim = F @ F.T
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1, keepdims=True)
    hardest_pos = np.where(pos, sim, np.inf).min(axis=1, keepdims=True)
    gaps = np.concatenate([
        np.abs(sim - (hardest_neg + hyper.mining_margin))[pos & np.isfinite(hardest_neg)],
        np.abs(sim - (hardest_pos - hyper.mining_margin))[neg & np.isfinite(hardest_pos)],
    ])
    return float(gaps.min()) if gaps.size else np.inf


def group_by_place(records: Sequence) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = defaultdict(list)
    for r in records:
        if r.place is None:
            raise DataError(f"record {r.id!r} has no place label; training needs one per record")
        groups[str(r.place)].append(r.id)
    return groups


def sample_batch(records: Sequence, P: int, K: int, seed) -> list[str]:
    """Pick P distinct places and K distinct records of each, place-major order."""
    groups = group_by_place(records)
    eligible = sorted(p for p, ids in groups.items() if len(ids) >= K)
    if len(eligible) < P:
        raise DataError(f"need {P} places with >= {K} records each, only {len(eligible)} qualify "
                        f"({len(groups)} places total)")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=P, replace=False)
    batch = []
    for i in chosen:
        ids = sorted(groups[eligible[i]])
        batch.extend(ids[j] for j in rng.choice(len(ids), size=K, replace=False))
    return batch
