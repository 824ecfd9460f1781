"""Tests for the retrieval database: exact search, GPS restriction and the file format."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_gps, naive_knn
from pitloc.checksum import fnv1a64, fnv1a64_reference
from pitloc.core import Descriptor, GpsFix, Pose
from pitloc.index import (
    ChecksumError,
    Database,
    LocRecord,
    NoCandidatesError,
    build_database,
    database_from_bytes,
    load_database,
    query_gps,
    query_knn,
    save_database,
)


def random_db(rng, n, dim, extent=200.0, dup_fraction=0.0, cell_size=25.0):
    M = rng.normal(size=(n, dim))
    if dup_fraction:
        src = rng.integers(0, n, size=int(n * dup_fraction))
        dst = rng.integers(0, n, size=src.size)
        M[dst] = M[src]
    M /= np.linalg.norm(M, axis=1, keepdims=True)
    xy = rng.uniform(0, extent, size=(n, 2))
    ids = rng.permutation(10 * n)[:n]
    recs = [LocRecord(Descriptor(M[i]), Pose(xy[i, 0], xy[i, 1], 0.0, 1, 0.0, int(ids[i]))) for i in range(n)]
    return Database(recs, cell_size=cell_size)


def as_pairs(hits):
    return [(h.embedding_distance, h.reading_id) for h in hits]


def assert_same_hits(got, expected):
    """Reading ids must agree exactly; distances may differ in the last bits of rounding."""
    assert [r for _, r in got] == [r for _, r in expected]
    np.testing.assert_allclose([d for d, _ in got], [d for d, _ in expected], rtol=1e-12, atol=1e-15)


class TestBuild:
    def test_empty(self):
        db = build_database([], Descriptor.normalized, descriptor_dim=4)
        assert len(db) == 0
        assert query_knn(db, np.ones(4), 3) == []
        assert query_gps(db, np.ones(4), GpsFix(0, 0), 20.0).no_candidates

    def test_failures_recorded(self):
        def embed(x):
            if x < 0:
                raise ValueError("bad reading")
            return Descriptor.normalized([x, 1.0])

        readings = [(Pose(i, 0, reading_id=i), v) for i, v in enumerate([1.0, -1.0, 2.0, -5.0, 0.5])]
        db = build_database(readings, embed)
        assert len(db) == 3
        assert sorted(db.failures) == [1, 3] and "bad reading" in db.failures[1]
        assert db.audit_grid()

    def test_duplicate_identifier(self):
        readings = [(Pose(0, 0, reading_id=7), [1.0, 0.0]), (Pose(1, 0, reading_id=7), [0.0, 1.0])]
        with pytest.raises(ValueError, match="duplicate identifier"):
            build_database(readings, Descriptor.normalized)

    def test_sorted_and_audited(self):
        db = random_db(np.random.default_rng(0), 500, 8)
        assert np.all(np.diff(db.ids) > 0)
        assert db.audit_grid()
        members = np.concatenate(list(db.grid.values()))
        assert sorted(members.tolist()) == list(range(500))

    def test_mixed_dimensions(self):
        recs = [LocRecord(Descriptor.normalized([1, 0]), Pose(0, 0, reading_id=1)),
                LocRecord(Descriptor.normalized([1, 0, 0]), Pose(0, 0, reading_id=2))]
        with pytest.raises(ValueError, match="mixed"):
            Database(recs)


class TestQueryKnn:
    def test_self_hit(self):
        db = random_db(np.random.default_rng(1), 200, 16)
        rec = db.records[37]
        hits = query_knn(db, rec.descriptor, 3)
        assert hits[0].reading_id == rec.reading_id and hits[0].embedding_distance == 0.0

    def test_k_exceeds_size(self):
        db = random_db(np.random.default_rng(2), 6, 4)
        hits = query_knn(db, np.ones(4) / 2, 50)
        assert len(hits) == 6
        assert as_pairs(hits) == sorted(as_pairs(hits))

    def test_dimension_mismatch(self):
        db = random_db(np.random.default_rng(2), 6, 4)
        with pytest.raises(ValueError, match="dimension"):
            query_knn(db, np.ones(5), 1)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        db = random_db(rng, 10_000, 256, dup_fraction=0.02)
        for j in range(100):
            q = db._mat[rng.integers(len(db))] if j % 4 == 0 else rng.normal(size=256)
            q = q / np.linalg.norm(q)
            assert_same_hits(as_pairs(query_knn(db, q, 5)), naive_knn(db._mat, db.ids, db.valid, q, 5))

    def test_invalid_records_excluded(self):
        recs = [LocRecord(Descriptor.normalized([0.0, 0.0]), Pose(0, 0, reading_id=1)),
                LocRecord(Descriptor.normalized([1.0, 0.0]), Pose(0, 0, reading_id=2))]
        db = Database(recs)
        assert [h.reading_id for h in query_knn(db, [0.0, 0.0], 5)] == [2]
        assert db.audit_grid()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_ties_by_reading_id(self, seed, k):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(5, 6))
        M = base[rng.integers(0, 5, size=40)]
        recs = [LocRecord(Descriptor.normalized(M[i]), Pose(0, 0, reading_id=int(r)))
                for i, r in enumerate(rng.permutation(1000)[:40])]
        db = Database(recs)
        q = db._mat[0]
        assert_same_hits(as_pairs(query_knn(db, q, k)), naive_knn(db._mat, db.ids, db.valid, q, k))


class TestQueryGps:
    def test_infinite_tau_matches_knn(self):
        rng = np.random.default_rng(4)
        db = random_db(rng, 800, 12)
        for _ in range(20):
            q = rng.normal(size=12)
            assert as_pairs(query_gps(db, q, GpsFix(50, 50), 1e6, 5)) == as_pairs(query_knn(db, q, 5))

    def test_far_fix(self):
        db = random_db(np.random.default_rng(5), 100, 4)
        hits = query_gps(db, np.ones(4), GpsFix(5000, 5000), 20.0)
        assert hits == [] and hits.no_candidates
        with pytest.raises(NoCandidatesError, match="no candidates within tau"):
            query_gps(db, np.ones(4), GpsFix(5000, 5000), 20.0, strict=True)

    def test_bad_tau(self):
        db = random_db(np.random.default_rng(5), 10, 4)
        with pytest.raises(ValueError):
            query_gps(db, np.ones(4), GpsFix(0, 0), 0.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        db = random_db(rng, 5000, 32, extent=300.0, dup_fraction=0.05)
        for _ in range(100):
            q = rng.normal(size=32)
            g = rng.uniform(-20, 320, size=2)
            got = query_gps(db, q, GpsFix(*g), 20.0, 5)
            assert_same_hits(as_pairs(got), naive_gps(db._mat, db.ids, db.valid, db.positions, q, g, 20.0, 5))
            for h in got:
                assert math.hypot(h.predicted_pose.x - g[0], h.predicted_pose.y - g[1]) <= 20.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 120.0), st.floats(1.0, 60.0))
    def test_grid_matches_scan_any_cell_size(self, seed, tau, cell):
        rng = np.random.default_rng(seed)
        db = random_db(rng, 300, 4, extent=150.0, cell_size=cell)
        q = rng.normal(size=4)
        g = rng.uniform(-30, 180, size=2)
        got = query_gps(db, q, GpsFix(*g), tau, 300)
        assert_same_hits(as_pairs(got), naive_gps(db._mat, db.ids, db.valid, db.positions, q, g, tau, 300))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        db = random_db(rng, 300, 10)
        save_database(db, tmp_path / "d.pitd")
        back = load_database(tmp_path / "d.pitd")
        assert back.to_bytes() == db.to_bytes()
        for a, b in zip(db.records, back.records):
            assert a.descriptor == b.descriptor
            assert (a.pose.x, a.pose.y, a.pose.heading, a.pose.trip_id, a.reading_id) == \
                   (b.pose.x, b.pose.y, b.pose.heading, b.pose.trip_id, b.reading_id)
        q = rng.normal(size=10)
        assert as_pairs(query_knn(back, q, 7)) == as_pairs(query_knn(db, q, 7))

    def test_layout(self):
        db = random_db(np.random.default_rng(8), 3, 5)
        data = db.to_bytes()
        assert data[:4] == b"PITD"
        assert len(data) == 4 + 4 + 4 + 8 + 3 * (5 * 4 + 3 * 8 + 2 * 8) + 8

    def test_flipped_byte(self):
        data = bytearray(random_db(np.random.default_rng(9), 20, 6).to_bytes())
        data[100] ^= 0x01
        with pytest.raises(ChecksumError):
            database_from_bytes(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(random_db(np.random.default_rng(9), 2, 3).to_bytes())
        data[4] = 9
        with pytest.raises(ValueError, match="version"):
            database_from_bytes(bytes(data))

    def test_empty(self, tmp_path):
        db = Database([], descriptor_dim=8)
        save_database(db, tmp_path / "e.pitd")
        back = load_database(tmp_path / "e.pitd")
        assert len(back) == 0 and back.descriptor_dim == 8


class TestChecksum:
    def test_known_vectors(self):
        # published FNV-1a 64-bit test values
        assert fnv1a64(b"") == 0xcbf29ce484222325
        assert fnv1a64(b"a") == 0xaf63dc4c8601ec8c
        assert fnv1a64(b"foobar") == 0x85944171f73967e8

    @given(st.binary(max_size=200))
    def test_matches_reference(self, data):
        assert fnv1a64(data) == fnv1a64_reference(data)
