"""Tests for triplet mining, the two losses, the negative cache and the training loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pitloc.bev import GridSpec
from pitloc.core import Pose, geo_distance, heading_delta
from pitloc.descriptor import EmbeddingModel, model_to_bytes
from pitloc.learn import (
    MiningRules,
    NegativeCache,
    TrainConfig,
    TrainingDiverged,
    TrainingSet,
    lazy_quadruplet_loss,
    mine_triplets,
    read_train_config,
    refresh_negative_cache,
    train,
    triplet_loss,
)
from pitloc.scenario import cloud_features
from pitloc.synth import ConditionTags, GpsModel, RayPattern, SweepConfig, TripSpec, WorldSpec, generate_world, simulate_trip


def unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def on_circle(d_ap, d_an, dim=8):
    """Anchor at e0 with p and n on the unit sphere at the given chord lengths."""
    a = np.zeros(dim); a[0] = 1.0

    def at(d, axis):
        c = 1.0 - d * d / 2.0
        v = np.zeros(dim); v[0] = c; v[axis] = math.sqrt(1.0 - c * c)
        return v

    return a, at(d_ap, 1), at(d_an, 2)


def line_trip(trip_id, offset, n=60, spacing=1.0, y=0.0, heading=0.0):
    return [Pose(offset + i * spacing, y, heading, trip_id, float(i), trip_id * 1000 + i) for i in range(n)]


def check_triplet(t, by_id, rules):
    a, p, n = by_id[t.anchor_id], by_id[t.positive_id], by_id[t.negative_id]
    assert len({t.anchor_id, t.positive_id, t.negative_id}) == 3
    assert geo_distance(a, p) <= rules.positive_radius
    assert rules.negative_min <= geo_distance(a, n) <= rules.negative_max
    assert heading_delta(a.heading, p.heading) <= rules.heading_window
    assert heading_delta(a.heading, n.heading) <= rules.heading_window
    assert a.trip_id != p.trip_id and a.trip_id != n.trip_id


def fd_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x); e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


class TestMiningRules:
    def test_defaults(self):
        r = MiningRules()
        assert (r.positive_radius, r.negative_min, r.negative_max, r.heading_window, r.margin) == (1, 2, 4, 30, 0.5)
        assert r.cross_trip

    def test_invalid(self):
        with pytest.raises(ValueError):
            MiningRules(positive_radius=2.5)
        with pytest.raises(ValueError):
            MiningRules(heading_window=0)
        with pytest.raises(ValueError):
            MiningRules(margin=0)


class TestMining:
    def test_single_trip_yields_nothing(self):
        res = mine_triplets(line_trip(1, 0.0), MiningRules(), count=50, seed=0)
        assert len(res) == 0
        assert res.skipped == 60

    def test_offset_trips_all_anchors(self):
        poses = line_trip(1, 0.0, n=40) + line_trip(2, 0.5, n=40)
        by_id = {p.reading_id: p for p in poses}
        rules = MiningRules()
        res = mine_triplets(poses, rules, count=80, seed=3)
        assert len(res) == 80 and res.skipped == 0
        assert {t.anchor_id for t in res} == set(by_id)
        for t in res:
            check_triplet(t, by_id, rules)

    def test_negative_boundary_closed(self):
        anchor = Pose(0, 0, 0, 1, 0, 1)
        pos = Pose(0.5, 0, 0, 2, 0, 2)
        exact = Pose(2.0, 0, 0, 2, 1, 3)
        res = mine_triplets([anchor, pos, exact], MiningRules(), count=1, seed=0)
        assert [(t.anchor_id, t.negative_id) for t in res] == [(1, 3)]
        short = Pose(1.99, 0, 0, 2, 1, 3)
        assert len(mine_triplets([anchor, pos, short], MiningRules(), count=1, seed=0)) == 0

    def test_positive_boundary_closed(self):
        poses = [Pose(0, 0, 0, 1, 0, 1), Pose(1.0, 0, 0, 2, 0, 2), Pose(-3.0, 0, 0, 2, 1, 3)]
        res = mine_triplets(poses, MiningRules(), count=1, seed=0)
        assert len(res) == 1 and res[0].positive_id == 2

    def test_heading_applies_to_negatives(self):
        poses = [Pose(0, 0, 0, 1, 0, 1), Pose(0.5, 0, 10, 2, 0, 2), Pose(3.0, 0, 45, 2, 1, 3)]
        assert len(mine_triplets(poses, MiningRules(), count=1, seed=0)) == 0

    def test_deterministic(self):
        poses = line_trip(1, 0.0) + line_trip(2, 0.3) + line_trip(3, 0.7)
        a = mine_triplets(poses, MiningRules(), 100, seed=5)
        b = mine_triplets(poses, MiningRules(), 100, seed=5)
        assert list(a) == list(b)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_random_tables_satisfy_rules(self, seed):
        rng = np.random.default_rng(seed)
        poses = [Pose(rng.uniform(0, 15), rng.uniform(0, 6), rng.uniform(0, 360) if rng.random() < 0.2 else
                      rng.normal(90, 10), int(rng.integers(1, 4)), float(i), i) for i in range(150)]
        by_id = {p.reading_id: p for p in poses}
        rules = MiningRules()
        for t in mine_triplets(poses, rules, 200, seed=seed):
            check_triplet(t, by_id, rules)


class TestTripletLoss:
    def test_inactive(self):
        a, p, n = on_circle(0.2, 0.9)
        loss, ga, gp, gn = triplet_loss(a, p, n, 0.5)
        assert loss == 0.0
        assert not (ga.any() or gp.any() or gn.any())

    def test_substitution(self):
        a, p, n = on_circle(0.6, 0.4)
        loss, *_ = triplet_loss(a, p, n, 0.5)
        assert loss == pytest.approx(0.7, abs=1e-12)

    def test_kink_zero_branch(self):
        a, p, n = on_circle(0.5, 1.0)
        n = a + (n - a) * (np.linalg.norm(a - p) + 0.5) / np.linalg.norm(a - n)
        loss, ga, gp, gn = triplet_loss(a, p, n, 0.5)
        if loss == 0.0:
            assert not ga.any()

    def test_finite_differences(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 20:
            a, p, n = unit(rng, 6), unit(rng, 6), unit(rng, 6)
            arg = np.linalg.norm(a - p) - np.linalg.norm(a - n) + 0.5
            if abs(arg) < 1e-3:
                continue
            _, ga, gp, gn = triplet_loss(a, p, n, 0.5)
            np.testing.assert_allclose(ga, fd_grad(lambda x: triplet_loss(x, p, n, 0.5)[0], a), rtol=1e-4, atol=1e-8)
            np.testing.assert_allclose(gp, fd_grad(lambda x: triplet_loss(a, x, n, 0.5)[0], p), rtol=1e-4, atol=1e-8)
            np.testing.assert_allclose(gn, fd_grad(lambda x: triplet_loss(a, p, x, 0.5)[0], n), rtol=1e-4, atol=1e-8)
            checked += 1

    @given(st.integers(0, 10**6), st.floats(0.01, 1.0))
    def test_bounds(self, seed, m):
        rng = np.random.default_rng(seed)
        a, p, n = unit(rng, 5), unit(rng, 5), unit(rng, 5)
        loss, *_ = triplet_loss(a, p, n, m)
        assert 0.0 <= loss <= np.linalg.norm(a - p) + m + 1e-12


class TestLazyQuadruplet:
    def test_inactive(self):
        a = np.array([1.0, 0.0, 0.0])
        p = np.array([[0.99, 0.141, 0.0]])
        N = np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        decoy = np.array([0.0, 0.0, 1.0])
        # negatives are >= 1.41 from both anchor and decoy, d_pos ~ 0.14
        loss, ga, gP, gN, gd = lazy_quadruplet_loss(a, p, N, decoy, 0.5, 0.25)
        assert loss == 0.0 and not ga.any() and not gN.any()

    def test_reduces_to_triplet(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, p, n = unit(rng, 4), unit(rng, 4), unit(rng, 4)
            q = lazy_quadruplet_loss(a, p[None], n[None], None, 0.5, None)
            t = triplet_loss(a, p, n, 0.5)
            assert q[0] == pytest.approx(t[0], abs=1e-15)
            np.testing.assert_allclose(q[1], t[1], atol=1e-15)
            np.testing.assert_allclose(q[2][0], t[2], atol=1e-15)
            np.testing.assert_allclose(q[3][0], t[3], atol=1e-15)

    def test_uses_closest_positive(self):
        a = np.array([1.0, 0.0])
        P = np.array([[0.0, 1.0], [0.8, 0.6]])
        N = np.array([[0.6, 0.8]])
        loss, *_ = lazy_quadruplet_loss(a, P, N, None, 0.5, None)
        assert loss == pytest.approx(0.5 + np.linalg.norm(a - P[1]) - np.linalg.norm(a - N[0]))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            lazy_quadruplet_loss(np.ones(3), np.zeros((0, 3)), np.ones((1, 3)), None)

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        a, P, N, dec = unit(rng, 5), np.array([unit(rng, 5) for _ in range(2)]), \
            np.array([unit(rng, 5) for _ in range(18)]), unit(rng, 5)
        _, ga, gP, gN, gd = lazy_quadruplet_loss(a, P, N, dec, 0.5, 0.25)
        f = lambda a_, P_, N_, d_: lazy_quadruplet_loss(a_, P_, N_, d_, 0.5, 0.25)[0]
        np.testing.assert_allclose(ga, fd_grad(lambda x: f(x, P, N, dec), a), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(gP, fd_grad(lambda x: f(a, x, N, dec), P), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(gN, fd_grad(lambda x: f(a, P, x, dec), N), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(gd, fd_grad(lambda x: f(a, P, N, x), dec), rtol=1e-4, atol=1e-8)


class TestNegativeCache:
    def test_identity_refresh_bitwise(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(30, 6))
        model = EmbeddingModel.identity(6)
        a = refresh_negative_cache(model, np.arange(30), X)
        b = refresh_negative_cache(model.copy(), np.arange(30), X)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()

    def test_hard_negative_is_exhaustive_argmin(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(50, 6))
        ids = np.arange(100, 150)
        cache = refresh_negative_cache(EmbeddingModel.random(6, 8, 4, seed=2), ids, X)
        cands = ids[10:40]
        for anchor in (100, 105, 149):
            za = cache.embeddings[anchor - 100]
            best = min(cands, key=lambda c: (np.sqrt(((cache.embeddings[c - 100] - za) ** 2).sum()), c))
            assert cache.select(anchor, cands, 1) == [int(best)]

    def test_empty_pool_falls_back(self):
        cache = refresh_negative_cache(EmbeddingModel.identity(3), [], np.zeros((0, 3)))
        assert len(cache) == 0
        got = cache.select(1, [5, 6, 7], 2, np.random.default_rng(0))
        assert len(got) == 2 and set(got) <= {5, 6, 7}


def _tiny_dataset():
    world = generate_world(WorldSpec(seed=3, extent=(220.0, 220.0), landmark_count=120, lattice_pitch=200.0))
    path = ((10.0, 10.0), (10.0, 110.0))
    sweep = SweepConfig(RayPattern(16, -15.0, 10.0, 90), max_range=30.0, clutter_objects=2)
    grid = GridSpec(32.0, 24.0, 1.0, 8.0, 8)
    poses, feats = {}, {}
    trips = {}
    for t, off in ((1, 0.0), (2, 0.45), (3, 0.8)):
        spec = TripSpec(t, path, 1.5, ConditionTags(lidar_occlusion=10.0 * t), off, 100.0 * t)
        td = simulate_trip(world, spec, GpsModel(0.0, 0.0), 3, sweep)
        trips[t] = [p.reading_id for p in td.poses]
        for p, c in zip(td.poses, td.clouds):
            poses[p.reading_id] = p
            feats[p.reading_id] = cloud_features(c, grid)
    return TrainingSet(poses, feats, trips[1] + trips[2], trips[3], trips[1] + trips[2])


@pytest.fixture(scope="module")
def tiny():
    return _tiny_dataset()


class TestTrain:
    def test_zero_iterations(self, tiny):
        model = EmbeddingModel.random(len(next(iter(tiny.features.values()))), 16, 8, seed=0)
        out, logbook = train(model, tiny, MiningRules(), TrainConfig(max_iterations=0))
        assert len(logbook) == 0
        assert model_to_bytes(out) == model_to_bytes(model)

    def test_zero_learning_rate(self, tiny):
        model = EmbeddingModel.random(len(next(iter(tiny.features.values()))), 16, 8, seed=0)
        out, logbook = train(model, tiny, MiningRules(), TrainConfig(max_iterations=20, learning_rate=0.0,
                                                                     cache_refresh_interval=10))
        for a, b in zip(model.parameters(), out.parameters()):
            np.testing.assert_array_equal(a, b)
        assert [r[0] for r in logbook.rows] == [10, 20]

    def test_improves_recall_and_is_deterministic(self, tiny, tmp_path):
        dim = len(next(iter(tiny.features.values())))
        model = EmbeddingModel.random(dim, 64, 32, seed=1)
        cfg = TrainConfig(max_iterations=500, cache_refresh_interval=100, seed=4)
        a, log_a = train(model, tiny, MiningRules(), cfg)
        b, log_b = train(model, tiny, MiningRules(), cfg)
        assert model_to_bytes(a) == model_to_bytes(b)
        assert log_a.rows[-1][2] >= log_a.initial_val_recall
        log_a.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "iteration,loss,val_recall_1m,learning_rate" and len(lines) == 6

    def test_quadruplet_mode_runs(self, tiny):
        dim = len(next(iter(tiny.features.values())))
        out, logbook = train(EmbeddingModel.random(dim, 16, 8, seed=2), tiny, MiningRules(),
                             TrainConfig(max_iterations=30, cache_refresh_interval=15, mode="quadruplet", batch_size=4))
        assert len(logbook) == 2 and all(math.isfinite(r[1]) for r in logbook.rows)

    def test_divergence_reported(self, tiny):
        dim = len(next(iter(tiny.features.values())))
        model = EmbeddingModel.random(dim, 16, 8, seed=0)
        model.weights[0] *= 1e306  # finite, but the forward pass overflows
        with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="non-finite"):
            train(model, tiny, MiningRules(), TrainConfig(max_iterations=5))

    def test_plateau_decay(self, tiny):
        dim = len(next(iter(tiny.features.values())))
        cfg = TrainConfig(max_iterations=40, cache_refresh_interval=5, learning_rate=1e-12, patience=2)
        _, logbook = train(EmbeddingModel.random(dim, 16, 8, seed=0), tiny, MiningRules(), cfg)
        rates = [r[3] for r in logbook.rows]
        assert rates[0] == 1e-12 and min(rates) < 1e-12


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.learning_rate == 0.001 and c.decay_factor == 10 and c.cache_refresh_interval == 1000
        assert (c.positives_per_item, c.negatives_per_item) == (2, 18)

    def test_file(self, tmp_path):
        p = tmp_path / "t.cfg"
        p.write_text("learning_rate = 0.01\nmode = quadruplet\n")
        c = read_train_config(p)
        assert c.learning_rate == 0.01 and c.mode == "quadruplet"
        p.write_text("learning_rat = 0.01\n")
        with pytest.raises(ValueError, match="unknown key"):
            read_train_config(p)

    def test_invalid(self):
        with pytest.raises(ValueError):
            TrainConfig(cache_refresh_interval=0)
        with pytest.raises(ValueError):
            TrainConfig(mode="pairs")
