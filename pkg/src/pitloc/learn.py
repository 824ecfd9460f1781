"""Geo-constrained triplet mining and metric-learning training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import read_config, resolve
from .core import Pose, heading_delta
from .descriptor import EmbeddingModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MiningRules:
    positive_radius: float = 1.0
    negative_min: float = 2.0
    negative_max: float = 4.0
    heading_window: float = 30.0
    cross_trip: bool = True
    margin: float = 0.5

    def __post_init__(self):
        if not 0 < self.positive_radius < self.negative_min < self.negative_max:
            raise ValueError("need 0 < positive_radius < negative_min < negative_max")
        if not 0 < self.heading_window <= 180:
            raise ValueError("heading_window must lie in (0, 180]")
        if not self.margin > 0:
            raise ValueError("margin must be positive")


@dataclass(frozen=True)
class Triplet:
    anchor_id: int
    positive_id: int
    negative_id: int


@dataclass
class MiningResult:
    triplets: list[Triplet]
    skipped: int = 0

    def __len__(self):
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]


class PoseTable:
    """Pose arrays plus a k-d tree for radius lookups."""

    def __init__(self, poses: Sequence[Pose]):
        self.poses = list(poses)
        self.ids = np.array([p.reading_id for p in self.poses], dtype=np.int64)
        self.xy = np.array([[p.x, p.y] for p in self.poses], dtype=np.float64).reshape(-1, 2)
        self.heading = np.array([p.heading for p in self.poses], dtype=np.float64)
        self.trip = np.array([p.trip_id for p in self.poses], dtype=np.int64)
        self.row = {int(r): i for i, r in enumerate(self.ids)}
        self.tree = cKDTree(self.xy) if len(self.poses) else None

    def __len__(self):
        return len(self.poses)

    def candidates(self, i: int, rules: MiningRules) -> tuple[np.ndarray, np.ndarray]:
        """Row indices of geo-valid positives and negatives for anchor row ``i``."""
        if self.tree is None:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        near = np.array(sorted(self.tree.query_ball_point(self.xy[i], rules.negative_max + 1e-9)), dtype=np.int64)
        near = near[near != i]
        d = np.hypot(self.xy[near, 0] - self.xy[i, 0], self.xy[near, 1] - self.xy[i, 1])
        dh = np.abs(self.heading[near] - self.heading[i])
        dh = np.where(dh > 180.0, 360.0 - dh, dh)
        ok = dh <= rules.heading_window
        if rules.cross_trip:
            ok &= self.trip[near] != self.trip[i]
        pos = near[ok & (d <= rules.positive_radius)]
        neg = near[ok & (d >= rules.negative_min) & (d <= rules.negative_max)]
        return pos, neg


def mine_triplets(poses: Sequence[Pose] | PoseTable, rules: MiningRules = MiningRules(), count: int = 1000,
                  seed: int = 0) -> MiningResult:
    """Sample up to ``count`` triplets.

    Anchors are visited in a seeded random order, cycling if needed. Each
    anchor draws its positive and negative uniformly from the geo-valid
    candidates; anchors lacking either are skipped and counted. Mining stops
    early once a full pass over the anchors yields nothing.
    """
    table = poses if isinstance(poses, PoseTable) else PoseTable(poses)
    rng = np.random.default_rng(seed)
    out: list[Triplet] = []
    skipped = 0
    n = len(table)
    if n == 0 or count <= 0:
        return MiningResult(out, 0)
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    while len(out) < count:
        produced = 0
        for i in rng.permutation(n):
            if i not in cache:
                cache[i] = table.candidates(int(i), rules)
            pos, neg = cache[i]
            if pos.size == 0 or neg.size == 0:
                skipped += 1
                continue
            p = pos[rng.integers(pos.size)]
            q = neg[rng.integers(neg.size)]
            out.append(Triplet(int(table.ids[i]), int(table.ids[p]), int(table.ids[q])))
            produced += 1
            if len(out) >= count:
                break
        if produced == 0:
            break
    return MiningResult(out, skipped)


def triplet_loss(a, p, n, margin: float = 0.5):
    """Hinge ``max(d(a,p) - d(a,n) + margin, 0)`` and its gradients w.r.t. ``a``, ``p``, ``n``.

    At the kink (argument exactly zero) and at coincident points the zero
    subgradient is used.
    """
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    dap_vec, dan_vec = a - p, a - n
    dap, dan = float(np.linalg.norm(dap_vec)), float(np.linalg.norm(dan_vec))
    arg = dap - dan + margin
    zero = np.zeros_like(a)
    if arg <= 0.0:
        return 0.0, zero, zero.copy(), zero.copy()
    u_ap = dap_vec / dap if dap > 0 else zero
    u_an = dan_vec / dan if dan > 0 else zero
    return arg, u_ap - u_an, -u_ap, u_an


def lazy_quadruplet_loss(a, positives, negatives, decoy, alpha: float = 0.5, beta: float | None = None):
    """Lazy quadruplet hinge.

    ``loss = max_j [alpha + d_pos - d(a, n_j)]_+ + max_j [beta + d_pos - d(decoy, n_j)]_+``
    with ``d_pos`` the distance to the closest positive. ``beta=None`` drops
    the second term. Returns ``(loss, grad_a, grad_positives, grad_negatives,
    grad_decoy)``; gradients flow only through the selected positive and the
    maximizing negatives.
    """
    a = np.asarray(a, dtype=np.float64)
    P = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    N = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if P.size == 0 or N.size == 0:
        raise ValueError("need at least one positive and one negative")
    dec = np.asarray(decoy, dtype=np.float64) if decoy is not None else np.zeros_like(a)

    def unit(v):
        nv = np.linalg.norm(v)
        return v / nv if nv > 0 else np.zeros_like(v)

    dp = np.linalg.norm(a - P, axis=1)
    ip = int(np.argmin(dp))
    d_pos = float(dp[ip])
    u_pos = unit(a - P[ip])

    ga, gP, gN, gd = np.zeros_like(a), np.zeros_like(P), np.zeros_like(N), np.zeros_like(dec)
    loss = 0.0

    dn = np.linalg.norm(a - N, axis=1)
    h1 = alpha + d_pos - dn
    j = int(np.argmax(h1))
    if h1[j] > 0.0:
        loss += float(h1[j])
        u = unit(a - N[j])
        ga += u_pos - u
        gP[ip] -= u_pos
        gN[j] += u

    if beta is not None and decoy is not None:
        dd = np.linalg.norm(dec - N, axis=1)
        h2 = beta + d_pos - dd
        k = int(np.argmax(h2))
        if h2[k] > 0.0:
            loss += float(h2[k])
            u = unit(dec - N[k])
            ga += u_pos
            gP[ip] -= u_pos
            gd -= u
            gN[k] += u
    return loss, ga, gP, gN, gd


@dataclass
class NegativeCache:
    ids: np.ndarray
    embeddings: np.ndarray
    row: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.row:
            self.row = {int(r): i for i, r in enumerate(self.ids)}

    def __len__(self):
        return int(self.ids.size)

    def select(self, anchor_id: int, candidate_ids: Sequence[int], n: int = 1,
               rng: np.random.Generator | None = None) -> list[int]:
        """The ``n`` candidates nearest the anchor in cached embedding space.

        Falls back to uniform sampling when the cache is empty or does not hold
        the anchor. Ties go to the smaller reading id.
        """
        cands = np.asarray(candidate_ids, dtype=np.int64)
        if cands.size == 0:
            return []
        if len(self) == 0 or anchor_id not in self.row:
            rng = rng or np.random.default_rng()
            return [int(c) for c in rng.choice(cands, size=min(n, cands.size), replace=False)]
        known = np.array([c for c in cands if int(c) in self.row], dtype=np.int64)
        if known.size == 0:
            rng = rng or np.random.default_rng()
            return [int(c) for c in rng.choice(cands, size=min(n, cands.size), replace=False)]
        za = self.embeddings[self.row[anchor_id]]
        Z = self.embeddings[[self.row[int(c)] for c in known]]
        d = np.sqrt(((Z - za) ** 2).sum(axis=1))
        order = np.lexsort((known, d))[:n]
        return [int(known[o]) for o in order]


def refresh_negative_cache(model: EmbeddingModel, pool_ids: Sequence[int], pool_features: np.ndarray) -> NegativeCache:
    """Re-embed the pool under the current parameters."""
    ids = np.asarray(pool_ids, dtype=np.int64)
    if ids.size == 0:
        return NegativeCache(ids, np.zeros((0, model.output_dim)))
    return NegativeCache(ids.copy(), model.embed_features(np.asarray(pool_features, dtype=np.float64)))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    decay_factor: float = 10.0
    mode: str = "triplet"  # or "quadruplet"
    batch_size: int = 16
    positives_per_item: int = 2
    negatives_per_item: int = 18
    hard_fraction: float = 0.5
    beta: float = -1.0  # negative means margin / 2
    cache_refresh_interval: int = 1000
    patience: int = 3
    min_improvement: float = 0.1  # percentage points of validation recall
    max_iterations: int = 1000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.cache_refresh_interval < 1:
            raise ValueError("cache_refresh_interval must be >= 1")
        if self.mode not in ("triplet", "quadruplet"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.decay_factor < 1:
            raise ValueError("decay_factor must be >= 1")


def train_config_from_mapping(values: Mapping[str, str], source: str = "train config") -> TrainConfig:
    defaults = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
    return TrainConfig(**resolve(defaults, values, source))


def read_train_config(path) -> TrainConfig:
    return train_config_from_mapping(read_config(path), str(path))


@dataclass
class TrainingSet:
    """Features and poses for training plus a validation query/database pairing."""

    poses: Mapping[int, Pose]
    features: Mapping[int, np.ndarray]
    train_ids: Sequence[int]
    val_query_ids: Sequence[int] = ()
    val_db_ids: Sequence[int] = ()


@dataclass
class TrainingLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    initial_val_recall: float = math.nan

    def __len__(self):
        return len(self.rows)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("iteration", "loss", "val_recall_1m", "learning_rate"))
            for it, loss, rec, lr in self.rows:
                w.writerow((it, repr(loss), repr(rec), repr(lr)))


class Adam:
    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def recall_within(model: EmbeddingModel, query_feats: np.ndarray, query_xy: np.ndarray,
                  db_feats: np.ndarray, db_xy: np.ndarray, radius: float = 1.0) -> float:
    """Percent of queries whose nearest database embedding lies within ``radius`` metres."""
    if len(query_feats) == 0 or len(db_feats) == 0:
        return math.nan
    Q = model.embed_features(query_feats)
    D = model.embed_features(db_feats)
    d2 = (Q * Q).sum(1)[:, None] + (D * D).sum(1)[None, :] - 2.0 * Q @ D.T
    nn = d2.argmin(axis=1)
    err = np.hypot(*(db_xy[nn] - query_xy).T)
    return 100.0 * float(np.mean(err <= radius))


def _normalize_backward(out: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    z = out / safe
    g = (grad_z - z * (z * grad_z).sum(axis=1, keepdims=True)) / safe
    return np.where(norm > 0, g, 0.0)


def train(model: EmbeddingModel, dataset: TrainingSet, rules: MiningRules = MiningRules(),
          config: TrainConfig = TrainConfig()) -> tuple[EmbeddingModel, TrainingLog]:
    """Minibatch metric learning with Adam and plateau learning-rate decay.

    The hard-negative cache is refreshed, and validation recall@1m measured,
    every ``cache_refresh_interval`` iterations. After ``patience``
    evaluations without ``min_improvement`` the rate is divided by
    ``decay_factor``. Returns a trained copy; the input model is untouched.
    """
    model = model.copy()
    logbook = TrainingLog()
    if config.max_iterations <= 0:
        return model, logbook

    rng = np.random.default_rng(config.seed)
    train_poses = [dataset.poses[i] for i in sorted(dataset.train_ids)]
    table = PoseTable(train_poses)
    feats = np.array([dataset.features[int(i)] for i in table.ids], dtype=np.float64)
    anchors, pos_lists, neg_lists = [], {}, {}
    for i in range(len(table)):
        pos, neg = table.candidates(i, rules)
        if pos.size and neg.size:
            anchors.append(i)
            pos_lists[i], neg_lists[i] = pos, neg
    if not anchors:
        raise ValueError("no training anchor has both a geo-positive and a geo-negative")
    anchors = np.array(anchors)

    vq = sorted(dataset.val_query_ids)
    vd = sorted(dataset.val_db_ids)
    vq_feats = np.array([dataset.features[i] for i in vq]).reshape(len(vq), -1)
    vq_xy = np.array([[dataset.poses[i].x, dataset.poses[i].y] for i in vq]).reshape(-1, 2)
    vd_feats = np.array([dataset.features[i] for i in vd]).reshape(len(vd), -1)
    vd_xy = np.array([[dataset.poses[i].x, dataset.poses[i].y] for i in vd]).reshape(-1, 2)

    def validate():
        return recall_within(model, vq_feats, vq_xy, vd_feats, vd_xy, rules.positive_radius)

    params = model.parameters()
    opt = Adam(params, config.adam_beta1, config.adam_beta2, config.adam_eps)
    lr = config.learning_rate
    beta = config.beta if config.beta >= 0 else rules.margin / 2.0
    best = validate()
    logbook.initial_val_recall = best
    stale = 0
    cache = refresh_negative_cache(model, table.ids, feats)
    interval_losses: list[float] = []

    for it in range(1, config.max_iterations + 1):
        if config.mode == "triplet":
            loss, grads = _triplet_step(model, feats, table, anchors, pos_lists, neg_lists, cache, rules, config, rng)
        else:
            loss, grads = _quadruplet_step(model, feats, table, anchors, pos_lists, neg_lists, cache, rules,
                                           config, beta, rng)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss or gradient at iteration {it} (loss={loss!r}, lr={lr!r})")
        opt.step(grads, lr)
        interval_losses.append(loss)

        if it % config.cache_refresh_interval == 0 or it == config.max_iterations:
            rec = validate()
            logbook.rows.append((it, float(np.mean(interval_losses)), rec, lr))
            log.info("iter %d loss %.4f val_recall_1m %.2f lr %.2e", it, logbook.rows[-1][1], rec, lr)
            interval_losses = []
            if not math.isnan(rec):
                if rec >= best + config.min_improvement:
                    best, stale = rec, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        lr /= config.decay_factor
                        stale = 0
            cache = refresh_negative_cache(model, table.ids, feats)
    return model, logbook


def _pick_negatives(cache, table, anchor_row, negs, n, hard_fraction, rng):
    n_hard = int(round(hard_fraction * n))
    chosen = []
    if n_hard:
        hard_ids = cache.select(int(table.ids[anchor_row]), table.ids[negs], n_hard, rng)
        chosen = [table.row[h] for h in hard_ids]
    rest = n - len(chosen)
    if rest > 0:
        chosen += list(rng.choice(negs, size=rest, replace=negs.size < rest))
    return np.array(chosen, dtype=np.int64)


def _forward_rows(model, feats, rows):
    out, acts = model.forward(feats[rows], keep=True)
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    z = out / np.where(norm > 0, norm, 1.0)
    return out, acts, z


def _triplet_step(model, feats, table, anchors, pos_lists, neg_lists, cache, rules, config, rng):
    B = config.batch_size
    a_rows = anchors[rng.integers(anchors.size, size=B)]
    p_rows = np.array([rng.choice(pos_lists[a]) for a in a_rows])
    use_hard = rng.random(B) < config.hard_fraction
    n_rows = np.array([
        _pick_negatives(cache, table, a, neg_lists[a], 1, 1.0 if h else 0.0, rng)[0]
        for a, h in zip(a_rows, use_hard)
    ])
    rows = np.concatenate([a_rows, p_rows, n_rows])
    out, acts, z = _forward_rows(model, feats, rows)
    za, zp, zn = z[:B], z[B:2 * B], z[2 * B:]
    gz = np.zeros_like(z)
    total = 0.0
    for b in range(B):
        loss, ga, gp, gn = triplet_loss(za[b], zp[b], zn[b], rules.margin)
        total += loss
        gz[b], gz[B + b], gz[2 * B + b] = ga, gp, gn
    gz /= B
    grads = model.backward(acts, _normalize_backward(out, gz))
    return total / B, grads


def _quadruplet_step(model, feats, table, anchors, pos_lists, neg_lists, cache, rules, config, beta, rng):
    B = config.batch_size
    n_pos, n_neg = config.positives_per_item, config.negatives_per_item
    rows, spans = [], []
    for a in anchors[rng.integers(anchors.size, size=B)]:
        pos = rng.choice(pos_lists[a], size=n_pos, replace=pos_lists[a].size < n_pos)
        neg = _pick_negatives(cache, table, a, neg_lists[a], n_neg, config.hard_fraction, rng)
        decoy = _pick_decoy(table, a, neg, rules, rng)
        start = len(rows)
        rows.extend([a, *pos, *neg, decoy])
        spans.append(start)
    rows = np.array(rows, dtype=np.int64)
    out, acts, z = _forward_rows(model, feats, rows)
    gz = np.zeros_like(z)
    total = 0.0
    for s in spans:
        ia, ip, ineg, idec = s, slice(s + 1, s + 1 + n_pos), slice(s + 1 + n_pos, s + 1 + n_pos + n_neg), s + 1 + n_pos + n_neg
        loss, ga, gp, gn, gd = lazy_quadruplet_loss(z[ia], z[ip], z[ineg], z[idec], rules.margin, beta)
        total += loss
        gz[ia] += ga
        gz[ip] += gp
        gz[ineg] += gn
        gz[idec] += gd
    gz /= B
    grads = model.backward(acts, _normalize_backward(out, gz))
    return total / B, grads


def _pick_decoy(table, anchor_row, neg_rows, rules, rng, tries: int = 64) -> int:
    """A reading farther than ``negative_max`` from the anchor and every negative."""
    pts = np.vstack([table.xy[anchor_row], table.xy[neg_rows]])
    for _ in range(tries):
        c = int(rng.integers(len(table)))
        if np.all(np.hypot(*(pts - table.xy[c]).T) > rules.negative_max):
            return c
    far = np.hypot(*(table.xy - table.xy[anchor_row]).T)
    return int(np.argmax(far))
