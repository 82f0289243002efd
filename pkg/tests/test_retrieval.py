import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmvpr.descriptor import Descriptor, Variant
from mmvpr.errors import ContractError, ValidationError
from mmvpr.retrieval import (EARTH_RADIUS_M, DescriptorDB, MatchRule, PlaceRecord, RecallReport, angular_diff,
                             haversine, recall_at_n, top_n, top_n_exhaustive)

M_PER_DEG = EARTH_RADIUS_M * math.pi / 180


def _desc(v, variant=Variant.TX_CLS):
    return Descriptor(np.asarray(v, dtype=np.float64), variant, False)


def _at(deg):
    a = math.radians(deg)
    return _desc([math.cos(a), math.sin(a)])


def three_query_fixture():
    """Queries at descriptor angles 0/90/180 deg; the third is beaten by a far distractor."""
    queries = [PlaceRecord("q1", 10.0, 10.0, _at(0)), PlaceRecord("q2", 20.0, 20.0, _at(90)),
               PlaceRecord("q3", 30.0, 30.0, _at(180))]
    db = [PlaceRecord("a", 10.0, 10.0, _at(5)), PlaceRecord("b", 20.0, 20.0, _at(95)),
          PlaceRecord("c", 30.0, 30.0, _at(200)), PlaceRecord("d1", -40.0, 0.0, _at(170)),
          PlaceRecord("d2", -40.0, 1.0, _at(300)), PlaceRecord("d3", -40.0, 2.0, _at(45))]
    return queries, db


class TestGeodesy:
    def test_half_circumference(self):
        assert abs(haversine((0, 0), (0, 180)) - 20_015_086.8) <= 1.0
        assert abs(haversine((0, 0), (0, 180)) - math.pi * EARTH_RADIUS_M) < 1e-6

    def test_identity_and_symmetry(self):
        assert haversine((47.1, 8.2), (47.1, 8.2)) == 0.0
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = (rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = (rng.uniform(-90, 90), rng.uniform(-180, 180))
            assert haversine(a, b) == haversine(b, a)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            a, b, c = [(rng.uniform(-90, 90), rng.uniform(-180, 180)) for _ in range(3)]
            assert haversine(a, c) <= (haversine(a, b) + haversine(b, c)) * (1 + 1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            haversine((91, 0), (0, 0))
        with pytest.raises(ValidationError):
            haversine((0, 0), (0, 181))
        with pytest.raises(ValidationError):
            PlaceRecord("x", 0.0, float("nan"), _at(0))

    @pytest.mark.parametrize("h1,h2,expect", [(10, 10, 0), (350, 10, 20), (0, 180, 180), (10, 350, 20), (720, 0, 0)])
    def test_angular_diff(self, h1, h2, expect):
        assert angular_diff(h1, h2) == expect

    @settings(max_examples=300)
    @given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
    def test_angular_range(self, a, b):
        d = angular_diff(a, b)
        assert 0 <= d <= 180
        assert abs(d - angular_diff(b, a)) < 1e-9


def boundary_fixture():
    """Database entries due north of the query at 24.9 / 25.1 m, and headings 39.9 / 40.1 deg off."""
    q = PlaceRecord("q", 0.0, 0.0, _at(0), heading=0.0)
    db = [PlaceRecord("near", 24.9 / M_PER_DEG, 0.0, _at(0), heading=0.0),
          PlaceRecord("far", 25.1 / M_PER_DEG, 0.0, _at(0), heading=0.0),
          PlaceRecord("turned_ok", 0.0, 0.0, _at(0), heading=39.9),
          PlaceRecord("turned_bad", 0.0, 0.0, _at(0), heading=320.0 - 0.1)]
    return q, db


def test_boundary_fixture():
    q, db = boundary_fixture()
    assert abs(haversine((0, 0), (db[0].lat, 0)) - 24.9) < 1e-6
    assert abs(haversine((0, 0), (db[1].lat, 0)) - 25.1) < 1e-6
    assert angular_diff(0.0, db[3].heading) == pytest.approx(40.1)
    from mmvpr.retrieval import positives_mask
    mask = positives_mask(q, DescriptorDB(db), MatchRule())
    assert mask.tolist() == [True, False, True, False]


def test_heading_ignored_when_missing():
    from mmvpr.retrieval import positives_mask
    q = PlaceRecord("q", 0.0, 0.0, _at(0), heading=0.0)
    db = DescriptorDB([PlaceRecord("a", 0.0, 0.0, _at(0), heading=None),
                       PlaceRecord("b", 0.0, 0.0, _at(0), heading=180.0)])
    assert positives_mask(q, db, MatchRule()).tolist() == [True, False]
    q_blind = PlaceRecord("q", 0.0, 0.0, _at(0))
    assert positives_mask(q_blind, db, MatchRule()).tolist() == [True, True]
    assert positives_mask(q, db, MatchRule(25.0, None)).tolist() == [True, True]


class TestTopN:
    def test_hand_ranking(self):
        db = [PlaceRecord(str(i), 0.0, 0.0, _at(a)) for i, a in enumerate([10, 350, 90, 180, 30])]
        ids = [i for i, _ in top_n(_at(0), db, 5)]
        # 10 and 350 tie at cos(10 deg); ascending id puts "0" first
        assert ids == ["0", "1", "4", "2", "3"]
        assert ids == [i for i, _ in top_n_exhaustive(_at(0), db, 5)]

    def test_self_ranks_first(self):
        rng = np.random.default_rng(0)
        db = [PlaceRecord(f"r{i}", 0.0, 0.0, _desc(rng.normal(size=8))) for i in range(50)]
        (best, score), *_ = top_n(db[17].descriptor, db, 3)
        assert best == "r17" and abs(score - 1) < 1e-12

    def test_n_exceeds_db(self):
        db = [PlaceRecord(str(i), 0.0, 0.0, _at(10 * i)) for i in range(4)]
        assert [i for i, _ in top_n(_at(0), db, 100)] == ["0", "1", "2", "3"]

    def test_ties_keep_all_boundary_candidates(self):
        # many exact duplicates straddling the cutoff
        db = [PlaceRecord(f"z{i:02d}", 0.0, 0.0, _at(0)) for i in range(30, 0, -1)]
        db += [PlaceRecord("best", 0.0, 0.0, _at(0))]
        got = [i for i, _ in top_n(_at(0), db, 5)]
        assert got == [i for i, _ in top_n_exhaustive(_at(0), db, 5)] == ["best", "z01", "z02", "z03", "z04"]

    def test_variant_mismatch(self):
        db = [PlaceRecord("a", 0.0, 0.0, _at(0))]
        with pytest.raises(ContractError):
            top_n(_desc([1.0, 0.0], Variant.IM_CLS_AVG), db, 1)
        with pytest.raises(ContractError):
            DescriptorDB(db + [PlaceRecord("b", 0.0, 0.0, _desc([1.0, 0.0], Variant.FULL))])

    def test_matches_exhaustive_on_random_databases(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            size, dim = int(rng.integers(1, 600)), int(rng.integers(1, 65))
            vals = rng.normal(size=(size, dim))
            if trial % 4 == 0:
                vals[rng.integers(0, size, size // 3)] = vals[0]  # exact ties
            db = [PlaceRecord(f"id{j}", 0.0, 0.0, _desc(v)) for j, v in enumerate(vals)]
            q = _desc(rng.normal(size=dim))
            n = int(rng.integers(1, size + 5))
            assert [i for i, _ in top_n(q, db, n)] == [i for i, _ in top_n_exhaustive(q, db, n)]


class TestRecall:
    def test_three_query_fixture(self):
        queries, db = three_query_fixture()
        rep = recall_at_n(queries, db, MatchRule(25.0, None), [1, 2, 3])
        assert rep.recalls[1] == pytest.approx(2 / 3, abs=1e-12)
        assert rep.recalls[2] == 1.0 and rep.recalls[3] == 1.0
        assert rep.per_query[2].top_ids[:2] == ["d1", "c"]
        assert rep.to_tsv() == "1\t0.6667\n2\t1.0000\n3\t1.0000\n"

    def test_database_permutation_invariance(self):
        queries, db = three_query_fixture()
        ref = recall_at_n(queries, db, MatchRule(), [1, 2]).to_json()
        rng = np.random.default_rng(0)
        for _ in range(10):
            perm = [db[i] for i in rng.permutation(len(db))]
            assert recall_at_n(queries, perm, MatchRule(), [1, 2]).to_json() == ref

    def test_exhaustive_n_recovers_everything(self):
        rng = np.random.default_rng(3)
        db = [PlaceRecord(f"d{i}", float(i % 7), 0.0, _desc(rng.normal(size=4))) for i in range(40)]
        queries = [PlaceRecord(f"q{i}", float(i), 0.0, _desc(rng.normal(size=4))) for i in range(7)]
        rep = recall_at_n(queries, db, MatchRule(), [1, 5, 40])
        assert rep.recalls[40] == 1.0
        values = list(rep.recalls.values())
        assert values == sorted(values)

    def test_positive_less_queries_excluded(self):
        queries, db = three_query_fixture()
        lost = PlaceRecord("lost", -80.0, 100.0, _at(0))
        rep = recall_at_n(queries + [lost], db, MatchRule(), [1, 2])
        assert rep.excluded == ["lost"] and rep.n_queries == 4 and rep.n_evaluated == 3
        assert rep.recalls[1] == pytest.approx(2 / 3)

    def test_validation(self):
        queries, db = three_query_fixture()
        with pytest.raises(ValidationError):
            recall_at_n([], db)
        with pytest.raises(ValidationError):
            recall_at_n(queries, db, Ns=[5, 1])

    def test_json_roundtrip(self):
        queries, db = three_query_fixture()
        rep = recall_at_n(queries, db, MatchRule(), [1, 2])
        assert RecallReport.from_json(rep.to_json()).to_json() == rep.to_json()
