import math

import numpy as np
import pytest

from mmvpr import audit
from mmvpr.encoder import ManifestRecord
from mmvpr.errors import ContractError, DataError
from mmvpr.metric import MSHyper, mine_pairs, ms_loss, sample_batch


def _oracle(F, labels, h):
    """Loop-by-loop Multi-Similarity loss."""
    B = len(labels)
    sim = [[sum(a * b for a, b in zip(F[i], F[j])) for j in range(B)] for i in range(B)]
    total = 0.0
    for i in range(B):
        pos = [sim[i][j] for j in range(B) if j != i and labels[j] == labels[i]]
        neg = [sim[i][j] for j in range(B) if labels[j] != labels[i]]
        mined_p = [s for s in pos if neg and s < max(neg) + h.mining_margin]
        mined_n = [s for s in neg if pos and s > min(pos) - h.mining_margin]
        total += math.log(1 + sum(math.exp(-h.alpha * (s - h.lambda_threshold)) for s in mined_p)) / h.alpha
        total += math.log(1 + sum(math.exp(h.beta * (s - h.lambda_threshold)) for s in mined_n)) / h.beta
    return total / B


def _unit(angles_deg):
    a = np.radians(angles_deg)
    return np.stack([np.cos(a), np.sin(a)], axis=1)


def test_hand_closed_form():
    # anchors at 0/90 deg (label 0) and 45/135 deg (label 1); every positive
    # pair is orthogonal, negatives sit at +-sqrt(2)/2
    h = MSHyper(alpha=2.0, beta=10.0, lambda_threshold=0.5, mining_margin=0.1)
    F, labels = _unit([0, 90, 45, 135]), [0, 0, 1, 1]
    r = math.sqrt(2) / 2
    pos_term = math.log(1 + math.exp(2 * 0.5)) / 2
    one_neg = math.log(1 + math.exp(10 * (r - 0.5))) / 10
    two_neg = math.log(1 + 2 * math.exp(10 * (r - 0.5))) / 10
    expect = (4 * pos_term + 2 * one_neg + 2 * two_neg) / 4
    loss, _ = ms_loss(F, labels, h)
    assert abs(loss - expect) < 1e-12


def test_empty_mining_is_zero():
    F, labels = _unit([0, 0, 90, 90]), [0, 0, 1, 1]
    loss, grad = ms_loss(F, labels)
    assert loss == 0.0 and np.all(grad == 0)


def test_positive_survives_only_with_a_negative():
    # the two mining conditions are the same inequality seen from both sides
    rng = np.random.default_rng(0)
    for _ in range(200):
        F = rng.normal(size=(6, 3))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        labels = np.array([0, 0, 1, 1, 2, 2])
        pos, neg = mine_pairs(F @ F.T, labels, 0.1)
        assert np.array_equal(pos.any(axis=1), neg.any(axis=1))


@pytest.mark.parametrize("seed", range(10))
def test_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    h = MSHyper(alpha=float(rng.uniform(0.5, 3)), beta=float(rng.uniform(5, 50)))
    labels = np.repeat(np.arange(3), 4)
    F = rng.normal(size=(12, 8)) + 2 * rng.normal(size=(3, 8))[labels]
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    loss, _ = ms_loss(F, labels, h)
    assert loss >= 0
    assert abs(loss - _oracle(F.tolist(), labels.tolist(), h)) < 1e-10


def test_relabel_and_permutation_invariance():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(3), 4)
    F = rng.normal(size=(12, 8))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    loss, grad = ms_loss(F, labels)
    relabeled, _ = ms_loss(F, np.array([7, 3, 5])[labels])
    assert relabeled == loss
    perm = rng.permutation(12)
    permuted, pgrad = ms_loss(F[perm], labels[perm])
    assert abs(permuted - loss) <= 1e-15 * max(1.0, loss)
    assert np.allclose(pgrad, grad[perm], atol=1e-15)


def test_contracts():
    with pytest.raises(ContractError):
        ms_loss(np.ones((4, 2)), [0, 0, 1, 1])
    with pytest.raises(ContractError):
        ms_loss(_unit([0, 10, 20]), [0, 0, 0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient(seed):
    rep = audit.check_ms_loss(seed, P=4, K=3, dim=8)
    assert rep.passed, rep.summary()


def _manifest(places=4, per=4):
    return [ManifestRecord(id=f"p{p}-{i}", image_tokens="x", lat=0.0, lon=0.0, split="train", place=f"p{p}")
            for p in range(places) for i in range(per)]


class TestSampler:
    def test_reproducible(self):
        recs = _manifest()
        assert sample_batch(recs, 2, 2, 5) == sample_batch(recs, 2, 2, 5)
        assert len({tuple(sample_batch(recs, 2, 2, s)) for s in range(10)}) > 1

    def test_histogram(self):
        recs = _manifest(6, 5)
        ids = sample_batch(recs, 4, 3, 0)
        places = [i.split("-")[0] for i in ids]
        assert len(set(ids)) == 12
        assert sorted(places.count(p) for p in set(places)) == [3, 3, 3, 3]

    def test_shortfall(self):
        with pytest.raises(DataError, match="places"):
            sample_batch(_manifest(), 5, 2, 0)
        with pytest.raises(DataError):
            sample_batch(_manifest(4, 2), 2, 3, 0)

    def test_missing_place(self):
        recs = [ManifestRecord(id="a", image_tokens="x", lat=0.0, lon=0.0, split="train")]
        with pytest.raises(DataError):
            sample_batch(recs, 1, 1, 0)
