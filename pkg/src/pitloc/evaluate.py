"""Evaluation protocols: percent localized within distance, and recall@1 / recall@1%."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Descriptor, GpsFix, Pose, geo_distance
from .index import DEFAULT_TAU, Database

DEFAULT_THRESHOLDS = (0.25, 0.5, 1.0, 5.0)
DEFAULT_RATIOS = (0.7, 0.1, 0.2)
OXFORD_CORRECT_RADIUS = 25.0

METHOD_MODES = ("exhaustive", "gps", "gps_only")


@dataclass(frozen=True)
class EvalSplit:
    train_trips: tuple[int, ...]
    val_trips: tuple[int, ...]
    test_trips: tuple[int, ...]
    query_ids: tuple[int, ...]

    def __post_init__(self):
        a, b, c = set(self.train_trips), set(self.val_trips), set(self.test_trips)
        if a & b or a & c or b & c:
            raise ValueError("split trip sets overlap")

    @property
    def database_trips(self) -> tuple[int, ...]:
        return tuple(sorted(self.train_trips + self.val_trips))


def _apportion(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items with every share >= 1."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("split ratios must be positive")
    exact = n * r / r.sum()
    counts = np.floor(exact).astype(int)
    order = sorted(range(len(r)), key=lambda i: (-round(exact[i] - counts[i], 9), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    for i in range(len(counts)):
        while counts[i] < 1:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1
    return counts.tolist()


def make_split(poses: Sequence[Pose], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0,
               n_queries: int = 10_000) -> EvalSplit:
    """Partition trips into train/val/test and sample query readings from test trips."""
    trips = sorted({p.trip_id for p in poses})
    if len(trips) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} trips to split, got {len(trips)}")
    rng = np.random.default_rng(seed)
    shuffled = [trips[i] for i in rng.permutation(len(trips))]
    n_train, n_val, n_test = _apportion(len(trips), ratios)
    train = tuple(sorted(shuffled[:n_train]))
    val = tuple(sorted(shuffled[n_train:n_train + n_val]))
    test = tuple(sorted(shuffled[n_train + n_val:]))
    test_set = set(test)
    candidates = sorted(p.reading_id for p in poses if p.trip_id in test_set)
    n = min(n_queries, len(candidates))
    picked = rng.choice(len(candidates), size=n, replace=False) if n else []
    queries = tuple(sorted(candidates[i] for i in picked))
    return EvalSplit(train, val, test, queries)


def within_distance_curve(errors: Sequence[float], thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> list[float]:
    """Percent of errors at or below each threshold. Infinite errors never count."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to summarize")
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be sorted ascending")
    return [100.0 * float(np.count_nonzero(e <= th)) / e.size for th in t]


def error_stats(errors: Sequence[float]) -> tuple[float, float]:
    """Mean and lower median (``sorted[(n - 1) // 2]``)."""
    e = np.sort(np.asarray(errors, dtype=np.float64))
    if e.size == 0:
        raise ValueError("no errors to summarize")
    mean = float(np.mean(e)) if np.all(np.isfinite(e)) else math.inf
    return mean, float(e[(e.size - 1) // 2])


def top_percent_depth(db_size: int) -> int:
    return max(1, math.ceil(db_size / 100))


def recall_topk(ranked_hits: Sequence[Sequence], truths: Sequence[Pose], correct_radius: float = OXFORD_CORRECT_RADIUS,
                db_size: int | None = None) -> tuple[float, float]:
    """Recall@1 and recall@1% in percent.

    ``ranked_hits[i]`` is the ranked list of predicted poses (or hits with a
    ``predicted_pose``) for query ``i``. A hit is correct within
    ``correct_radius`` metres of the query's true pose.
    """
    if len(ranked_hits) != len(truths):
        raise ValueError("one ranked list per query is required")
    if not truths:
        return 0.0, 0.0
    if db_size is None:
        db_size = max((len(h) for h in ranked_hits), default=0)
    depth = top_percent_depth(db_size)
    at1 = at_pct = 0
    for hits, truth in zip(ranked_hits, truths):
        ok = [geo_distance(getattr(h, "predicted_pose", h), truth) <= correct_radius for h in hits[:depth]]
        at1 += bool(ok[:1] and ok[0])
        at_pct += any(ok)
    n = len(truths)
    return 100.0 * at1 / n, 100.0 * at_pct / n


@dataclass(frozen=True)
class RetrievalMethod:
    """How queries are answered.

    ``exhaustive`` searches the whole database, ``gps`` restricts search to
    records within ``tau`` of the fix, ``gps_only`` reports the GPS fix itself.
    """

    mode: str = "gps"
    tau: float = DEFAULT_TAU
    name: str = ""

    def __post_init__(self):
        if self.mode not in METHOD_MODES:
            raise ValueError(f"unknown method mode {self.mode!r}")
        if self.mode == "gps" and not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.name:
            object.__setattr__(self, "name", self.mode)


@dataclass(frozen=True)
class QueryRow:
    query_id: int
    true_pose: Pose
    predicted: Pose | None
    error_m: float
    gps_error_m: float
    rank_of_nearest_true: int
    correct_at_1: bool = False
    correct_at_1pct: bool = False


@dataclass
class EvalReport:
    method: RetrievalMethod
    rows: list[QueryRow]
    thresholds: tuple[float, ...]
    curve: list[float]
    mean_error: float
    median_error: float
    recall_at_1: float
    recall_at_1pct: float
    db_size: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error_m for r in self.rows])

    def summary_lines(self) -> list[str]:
        lines = [
            f"method = {self.method.name}",
            f"mode = {self.method.mode}",
            f"tau_m = {self.method.tau!r}",
            f"queries = {len(self.rows)}",
            f"database_records = {self.db_size}",
            f"mean_error_m = {self.mean_error!r}",
            f"median_error_m = {self.median_error!r}",
            f"recall_at_1 = {self.recall_at_1!r}",
            f"recall_at_1pct = {self.recall_at_1pct!r}",
        ]
        lines += [f"within_{t!r}m = {p!r}" for t, p in zip(self.thresholds, self.curve)]
        return lines


def _nearest_true_rank(db: Database, idx: np.ndarray, dists: np.ndarray, truth: Pose) -> int:
    if idx.size == 0:
        return 0
    p = db.positions[idx]
    geo = np.hypot(p[:, 0] - truth.x, p[:, 1] - truth.y)
    target = int(np.lexsort((db.ids[idx], geo))[0])
    dt, it = dists[target], db.ids[idx][target]
    ids = db.ids[idx]
    return int(np.count_nonzero((dists < dt) | ((dists == dt) & (ids < it)))) + 1


def run_benchmark(db: Database, split: EvalSplit, method: RetrievalMethod, poses: Mapping[int, Pose],
                  descriptors: Mapping[int, Descriptor] | None = None, gps: Mapping[int, GpsFix] | None = None,
                  thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                  correct_radius: float = OXFORD_CORRECT_RADIUS) -> EvalReport:
    """Evaluate every query of ``split`` against ``db``.

    The localization error is the planar distance between the top hit's pose
    and the true pose. A GPS-restricted query with no candidates scores an
    infinite error.
    """
    if method.mode != "gps_only" and descriptors is None:
        raise ValueError(f"method {method.mode!r} needs query descriptors")
    if method.mode != "exhaustive" and gps is None:
        raise ValueError(f"method {method.mode!r} needs GPS fixes")
    depth = top_percent_depth(db.searchable)
    all_idx = np.flatnonzero(db.valid)
    rows: list[QueryRow] = []
    for qid in split.query_ids:
        truth = poses[qid]
        fix = gps.get(qid) if gps is not None else None
        gps_err = geo_distance(fix, truth) if fix is not None else math.nan
        if method.mode == "gps_only":
            pred = Pose(fix.x, fix.y, truth.heading, reading_id=-1)
            err = geo_distance(pred, truth)
            ok = err <= correct_radius
            rows.append(QueryRow(qid, truth, pred, err, gps_err, 0, ok, ok))
            continue
        q = descriptors[qid]
        idx = all_idx if method.mode == "exhaustive" else db.records_within(fix, method.tau)
        if idx.size == 0 or not q.valid:
            rows.append(QueryRow(qid, truth, None, math.inf, gps_err, 0))
            continue
        hits = db._rank(idx, q.values, depth)
        pred = hits[0].predicted_pose
        dists = db.exact_distances(idx, q.values)
        ok = [geo_distance(h.predicted_pose, truth) <= correct_radius for h in hits]
        rows.append(QueryRow(qid, truth, pred, geo_distance(pred, truth), gps_err,
                             _nearest_true_rank(db, idx, dists, truth), ok[0], any(ok)))
    errors = [r.error_m for r in rows]
    thresholds = tuple(float(t) for t in thresholds)
    if rows:
        curve = within_distance_curve(errors, thresholds)
        mean, median = error_stats(errors)
        r1 = 100.0 * sum(r.correct_at_1 for r in rows) / len(rows)
        rpct = 100.0 * sum(r.correct_at_1pct for r in rows) / len(rows)
    else:
        curve, mean, median, r1, rpct = [0.0] * len(thresholds), math.nan, math.nan, 0.0, 0.0
    return EvalReport(method, rows, thresholds, curve, mean, median, r1, rpct, db_size=db.searchable)


def write_report(report: EvalReport, outdir) -> None:
    """Write ``report.csv``, ``curve.csv`` and ``summary.txt`` into ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("query_id,error_m,gps_error_m,rank_of_nearest_true\n")
        for r in report.rows:
            fh.write(f"{r.query_id},{r.error_m!r},{r.gps_error_m!r},{r.rank_of_nearest_true}\n")
    with open(out / "curve.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("threshold_m,percent\n")
        for t, p in zip(report.thresholds, report.curve):
            fh.write(f"{t!r},{p!r}\n")
    (out / "summary.txt").write_text("\n".join(report.summary_lines()) + "\n", encoding="utf-8")
