import math

import numpy as np
import pytest

from mmvpr.cammf import AgentSet
from mmvpr.descriptor import (Descriptor, StoredDescriptor, Variant, compose, compose_backward, load_store,
                              save_store, similarity)
from mmvpr.errors import DimensionError, FormatError, LengthError
from mmvpr.retrieval import PlaceRecord, top_n
from mmvpr.seqcore import ParamStore, grad_check


def _agents(D, seed=0, lead=()):
    rng = np.random.default_rng(seed)
    return AgentSet(*(rng.normal(size=lead + (D,)) for _ in range(3)))


@pytest.mark.parametrize("variant,dim", [(Variant.FULL, 2304), (Variant.IM_CLS_AVG, 1536), (Variant.TX_CLS, 768)])
def test_dimensions_at_backbone_width(variant, dim):
    d = compose(_agents(768), variant)
    assert len(d) == dim == variant.dim(768)
    assert abs(np.linalg.norm(d.values) - 1) <= 1e-6


def test_concatenation_order():
    a = AgentSet(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0]))
    assert np.array_equal(compose(a, "FULL", normalize=False).values, [1, 0, 0, 1, 1, 1])
    assert np.array_equal(compose(a, "TX_CLS", normalize=False).values, [1, 1])


def test_full_prefix_is_image_variant():
    a = _agents(5, 1)
    full = compose(a, Variant.FULL, normalize=False).values
    assert np.array_equal(full[:10], compose(a, Variant.IM_CLS_AVG, normalize=False).values)


def test_per_segment_normalisation():
    d = compose(_agents(4, 2), Variant.FULL, per_segment=True)
    for i in range(3):
        assert abs(np.linalg.norm(d.values[4 * i:4 * i + 4]) - 1) < 1e-12


class TestSimilarity:
    def test_self(self):
        v = np.random.default_rng(0).normal(size=7)
        assert abs(similarity(v, v) - 1) <= 1e-6

    def test_orthogonal(self):
        assert similarity([1.0, 0.0], [0.0, 3.0]) == 0.0

    def test_closed_form(self):
        assert abs(similarity([1.0, 0.0], [1.0, 1.0]) - 1 / math.sqrt(2)) < 1e-12

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            a, b = rng.normal(size=(2, 9)) * rng.uniform(1e-3, 1e3, size=(2, 1))
            s = similarity(a, b)
            assert abs(s - similarity(b, a)) <= 1e-12
            assert -1 - 1e-9 <= s <= 1 + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            similarity(np.ones(3), np.ones(4))

    def test_variant_mismatch(self):
        a = Descriptor(np.ones(4), Variant.IM_CLS_AVG, False)
        b = Descriptor(np.ones(4), Variant.TX_CLS, False)
        with pytest.raises(DimensionError):
            similarity(a, b)


def test_ranking_invariant_to_positive_rescaling():
    rng = np.random.default_rng(3)
    for trial in range(20):
        vals = rng.normal(size=(200, 12))
        db = [PlaceRecord(f"r{i:03d}", 0.0, 0.0, Descriptor(v, Variant.TX_CLS, False)) for i, v in enumerate(vals)]
        q = Descriptor(rng.normal(size=12), Variant.TX_CLS, False)
        ref = [i for i, _ in top_n(q, db, 10)]
        scaled = [PlaceRecord(r.id, 0.0, 0.0, Descriptor(r.descriptor.values * rng.uniform(0.1, 10), Variant.TX_CLS,
                                                         False)) for r in db]
        q_scaled = Descriptor(q.values * 7.5, Variant.TX_CLS, False)
        assert [i for i, _ in top_n(q_scaled, scaled, 10)] == ref


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("per_segment", [False, True])
def test_compose_backward(variant, per_segment):
    a = _agents(4, 5, lead=(2,))
    probe = np.random.default_rng(6).normal(size=(2, variant.dim(4)))
    store = ParamStore()
    for b in "mat":
        store.add(b, a[b])

    def agents(st):
        return AgentSet(st["m"], st["a"], st["t"])

    def loss(st):
        return float(np.sum(probe * compose(agents(st), variant, per_segment=per_segment).values))

    def grads(st):
        g = compose_backward(probe, agents(st), variant, per_segment=per_segment)
        for b in "mat":
            st.accumulate(b, g[b])

    rep = grad_check(loss, store, grad_fn=grads)
    assert rep.passed, rep.summary()


class TestStore:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [StoredDescriptor("a", 47.5, 8.5, 90.0, rng.normal(size=6).astype(np.float32).astype(np.float64)),
                StoredDescriptor("bé", -10.0, -170.0, None, rng.normal(size=6).astype(np.float32).astype(np.float64))]
        save_store(tmp_path / "s.mmds", recs)
        dim, back = load_store(tmp_path / "s.mmds")
        assert dim == 6
        for r, b in zip(recs, back):
            assert (r.id, r.lat, r.lon, r.heading) == (b.id, b.lat, b.lon, b.heading)
            assert np.array_equal(r.values, b.values)

    def test_empty(self, tmp_path):
        save_store(tmp_path / "s.mmds", [])
        assert load_store(tmp_path / "s.mmds") == (0, [])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "s.mmds").write_bytes(b"NOPE" + b"\0" * 12)
        with pytest.raises(FormatError):
            load_store(tmp_path / "s.mmds")

    def test_truncated(self, tmp_path):
        save_store(tmp_path / "s.mmds", [StoredDescriptor("a", 0, 0, None, np.ones(8))])
        raw = (tmp_path / "s.mmds").read_bytes()
        (tmp_path / "t.mmds").write_bytes(raw[:-3])
        with pytest.raises(LengthError):
            load_store(tmp_path / "t.mmds")

    def test_mixed_dims(self, tmp_path):
        with pytest.raises(DimensionError):
            save_store(tmp_path / "s.mmds", [StoredDescriptor("a", 0, 0, None, np.ones(2)),
                                             StoredDescriptor("b", 0, 0, None, np.ones(3))])
