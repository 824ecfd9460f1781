"""Command-line pipeline: ``synth``, ``build-db``, ``train``, ``query``, ``eval``, ``analyze``.

All commands share one flat configuration. Defaults are overridden by a
``--config`` file, then by ``--seed`` and ``--set key=value`` flags. Every
command writes its fully resolved configuration to ``<workdir>/<command>.config``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis
from .bev import read_cloud, remove_ground, voxelize, write_cloud
from .checksum import fnv1a64
from .config import ConfigError, format_config, read_config, resolve
from .core import Descriptor, GpsFix, read_pose_table, write_pose_table
from .descriptor import EmbeddingModel, bev_feature_vector, load_model, model_to_bytes, save_model
from .evaluate import RetrievalMethod, make_split, run_benchmark, write_report
from .index import NoCandidatesError, build_database, load_database, save_database
from .learn import MiningRules, TrainConfig, TrainingSet, train
from .scenario import BenchmarkConfig, build_benchmark
from .synth import load_world, read_gps, read_metadata, save_world, write_gps, write_metadata

log = logging.getLogger("pitloc")

COMMANDS = ("synth", "build-db", "train", "query", "eval", "analyze")


def _defaults() -> dict:
    d: dict = {"workdir": "run"}
    for f in fields(BenchmarkConfig):
        d[f.name] = getattr(BenchmarkConfig(), f.name)
    d.update({
        "write_clouds": "queries",
        "hidden": 256,
        "output_dim": 256,
        "init_seed": -1,
        "model": "model.pitm",
        "database": "database.pitd",
        "db_include_queries": False,
        "cell_size": 25.0,
        "val_stride": 3,
        "tau": 20.0,
        "k": 5,
        "correct_radius": 25.0,
        "thresholds": (0.25, 0.5, 1.0, 5.0),
        "methods": ("exhaustive", "gps", "gps_only"),
        "failure_threshold": analysis.FAILURE_THRESHOLD,
        "max_gps_error": analysis.MAX_GPS_ERROR,
    })
    for f in fields(MiningRules):
        d[f.name] = getattr(MiningRules(), f.name)
    for f in fields(TrainConfig):
        d["train_" + f.name] = getattr(TrainConfig(), f.name)
    d["train_max_iterations"] = 2000
    d["train_cache_refresh_interval"] = 250
    d["train_mode"] = "quadruplet"
    return d


DEFAULTS = _defaults()


def resolve_config(config_path: str | None, seed: int | None, sets: list[str]) -> dict:
    overrides: dict[str, str] = {}
    if config_path:
        overrides.update(read_config(config_path))
    if seed is not None:
        overrides["seed"] = str(seed)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = resolve(DEFAULTS, overrides)
    if cfg["write_clouds"] not in ("none", "queries", "all"):
        raise ConfigError("write_clouds must be none, queries or all")
    return cfg


def benchmark_config(cfg: dict) -> BenchmarkConfig:
    return BenchmarkConfig(**{f.name: cfg[f.name] for f in fields(BenchmarkConfig)})


def mining_rules(cfg: dict) -> MiningRules:
    return MiningRules(**{f.name: cfg[f.name] for f in fields(MiningRules)})


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f.name: cfg["train_" + f.name] for f in fields(TrainConfig)})


class Workspace:
    """File layout of one pipeline run."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.root = Path(cfg["workdir"])

    def path(self, name: str) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    world = property(lambda self: self.path("world.pitw"))
    poses = property(lambda self: self.path("poses.csv"))
    gps = property(lambda self: self.path("gps.csv"))
    metadata = property(lambda self: self.path("metadata.csv"))
    features = property(lambda self: self.path("features.npy"))
    feature_ids = property(lambda self: self.path("feature_ids.npy"))
    clouds = property(lambda self: self.path("clouds"))
    model = property(lambda self: self.path(self.cfg["model"]))
    database = property(lambda self: self.path(self.cfg["database"]))
    eval_dir = property(lambda self: self.path("eval"))
    analysis_dir = property(lambda self: self.path("analysis"))

    def require(self, *paths: Path) -> None:
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise FileNotFoundError(f"missing input file(s): {', '.join(missing)}")

    def write_sidecar(self, command: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / f"{command}.config").write_text(format_config(self.cfg), encoding="utf-8")

    def load_inputs(self):
        self.require(self.poses, self.gps, self.features, self.feature_ids)
        poses = {p.reading_id: p for p in read_pose_table(self.poses)}
        ids = np.load(self.feature_ids)
        X = np.load(self.features)
        if X.shape[0] != ids.shape[0]:
            raise ValueError(f"{self.features}: row count does not match {self.feature_ids}")
        feats = {int(i): x for i, x in zip(ids, X)}
        missing = sorted(set(poses) - set(feats))
        if missing:
            raise ValueError(f"{self.features}: no features for reading {missing[0]}")
        return poses, feats, read_gps(self.gps)


def _split(cfg: dict, poses: dict):
    return make_split(list(poses.values()), cfg["split"], cfg["seed"], cfg["n_queries"])


def _ids_in_trips(poses: dict, trips) -> list[int]:
    keep = set(trips)
    return sorted(i for i, p in poses.items() if p.trip_id in keep)


def untrained_model(cfg: dict, input_dim: int) -> EmbeddingModel:
    seed = cfg["seed"] if cfg["init_seed"] < 0 else cfg["init_seed"]
    return EmbeddingModel.random(input_dim, cfg["hidden"], cfg["output_dim"], seed)


def _model_for(ws: Workspace, input_dim: int) -> EmbeddingModel:
    if ws.model.exists():
        return load_model(ws.model)
    log.warning("%s not found; using the untrained random-init model", ws.model)
    return untrained_model(ws.cfg, input_dim)


def _database_ids(cfg: dict, poses: dict) -> list[int]:
    split = _split(cfg, poses)
    trips = split.database_trips + (split.test_trips if cfg["db_include_queries"] else ())
    return _ids_in_trips(poses, trips)


def _embed_database(cfg: dict, model: EmbeddingModel, poses: dict, feats: dict):
    ids = _database_ids(cfg, poses)
    E = model.embed_features(np.array([feats[i] for i in ids]))
    return build_database(((poses[i], e) for i, e in zip(ids, E)), Descriptor.normalized,
                          cell_size=cfg["cell_size"], descriptor_dim=model.output_dim)


def _model_tag(model: EmbeddingModel) -> str:
    return f"{fnv1a64(model_to_bytes(model)):016x}"


def cmd_synth(cfg: dict, workers: int = 1) -> None:
    ws = Workspace(cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    bench = build_benchmark(benchmark_config(cfg), workers=workers)
    save_world(bench.world, ws.world)
    ids = sorted(bench.poses)
    write_pose_table(ws.poses, [bench.poses[i] for i in ids])
    write_gps(ws.gps, [bench.poses[i] for i in ids], [bench.gps[i] for i in ids])
    write_metadata(ws.metadata, [r for t in bench.trips for r in t.metadata_rows()])
    np.save(ws.feature_ids, np.array(ids, dtype=np.int64))
    np.save(ws.features, np.array([bench.features[i] for i in ids], dtype=np.float64))
    if cfg["write_clouds"] != "none":
        wanted = set(bench.split.query_ids) if cfg["write_clouds"] == "queries" else None
        ws.clouds.mkdir(exist_ok=True)
        for trip in bench.trips:
            for i, pose in enumerate(trip.poses):
                if wanted is None or pose.reading_id in wanted:
                    write_cloud(ws.clouds / f"{pose.reading_id}.pitc", trip.clouds[i])
    ws.write_sidecar("synth")
    print(f"synth: {len(ids)} readings in {len(bench.trips)} trips -> {ws.root}")


def cmd_train(cfg: dict, workers: int = 1) -> None:
    ws = Workspace(cfg)
    poses, feats, _ = ws.load_inputs()
    split = _split(cfg, poses)
    train_ids = _ids_in_trips(poses, split.train_trips)
    val_ids = _ids_in_trips(poses, split.val_trips)[:: max(1, cfg["val_stride"])]
    model0 = untrained_model(cfg, len(next(iter(feats.values()))))
    data = TrainingSet(poses, feats, train_ids, val_ids, train_ids)
    model, logbook = train(model0, data, mining_rules(cfg), train_config(cfg))
    ws.model.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, ws.model)
    logbook.write_csv(ws.model.with_name(ws.model.stem + "_log.csv"))
    ws.write_sidecar("train")
    last = logbook.rows[-1][2] if logbook.rows else logbook.initial_val_recall
    print(f"train: {len(logbook)} log rows, validation recall@1m {last:.2f}% -> {ws.model}")


def cmd_build_db(cfg: dict, workers: int = 1) -> None:
    ws = Workspace(cfg)
    poses, feats, _ = ws.load_inputs()
    model = _model_for(ws, len(next(iter(feats.values()))))
    db = _embed_database(cfg, model, poses, feats)
    ws.database.parent.mkdir(parents=True, exist_ok=True)
    save_database(db, ws.database)
    Path(str(ws.database) + ".model").write_text(_model_tag(model) + "\n", encoding="utf-8")
    ws.write_sidecar("build-db")
    print(f"build-db: {len(db)} records, {len(db.failures)} failures -> {ws.database}")


def _database_for(ws: Workspace, model: EmbeddingModel, poses, feats):
    """The saved database, re-embedded in memory when it was built with another model."""
    ws.require(ws.database)
    tag_file = Path(str(ws.database) + ".model")
    if tag_file.exists() and tag_file.read_text(encoding="utf-8").strip() == _model_tag(model):
        return load_database(ws.database, ws.cfg["cell_size"])
    log.warning("%s was built with a different model; re-embedding its readings", ws.database)
    return _embed_database(ws.cfg, model, poses, feats)


def cmd_eval(cfg: dict, workers: int = 1) -> None:
    ws = Workspace(cfg)
    poses, feats, gps = ws.load_inputs()
    ws.require(ws.database)
    model = _model_for(ws, len(next(iter(feats.values()))))
    db = _database_for(ws, model, poses, feats)
    split = _split(cfg, poses)
    q = list(split.query_ids)
    E = model.embed_features(np.array([feats[i] for i in q]))
    descs = {i: Descriptor.normalized(e) for i, e in zip(q, E)}
    for mode in cfg["methods"]:
        method = RetrievalMethod(mode, cfg["tau"], mode)
        report = run_benchmark(db, split, method, poses, descs, gps, cfg["thresholds"], cfg["correct_radius"])
        write_report(report, ws.eval_dir / method.name)
        print(f"eval: {method.name}: median {report.median_error:.3f} m, mean {report.mean_error:.3f} m")
    ws.write_sidecar("eval")


def cmd_analyze(cfg: dict, workers: int = 1) -> None:
    ws = Workspace(cfg)
    reports = {m: ws.eval_dir / m / "report.csv" for m in cfg["methods"]}
    ws.require(ws.metadata, *reports.values())
    info = analysis.analyze_reports(reports, read_metadata(ws.metadata), ws.analysis_dir,
                                    cfg["failure_threshold"], cfg["max_gps_error"])
    ws.write_sidecar("analyze")
    print(f"analyze: {info['rows']} rows, {info['dropped_gps']} dropped by GPS filter, "
          f"{info['excluded_missing']} without metadata -> {ws.analysis_dir}")


def cmd_query(cfg: dict, cloud_path: str, gps_text: str | None = None, workers: int = 1) -> None:
    ws = Workspace(cfg)
    ws.require(Path(cloud_path), ws.database)
    cloud = read_cloud(cloud_path)
    x = bev_feature_vector(voxelize(remove_ground(cloud, cfg["z_cut"]), benchmark_config(cfg).grid_spec))
    model = _model_for(ws, x.shape[0])
    db = load_database(ws.database, cfg["cell_size"])
    tag_file = Path(str(ws.database) + ".model")
    if tag_file.exists() and tag_file.read_text(encoding="utf-8").strip() != _model_tag(model):
        raise ValueError(f"{ws.database} was built with a different model; rerun build-db")
    q = Descriptor.normalized(model.embed_features(x)[0])
    if not q.valid:
        raise ValueError(f"{cloud_path}: empty descriptor")
    if gps_text:
        try:
            gx, gy = (float(v) for v in gps_text.split(","))
        except ValueError:
            raise ValueError(f"--gps expects x,y, got {gps_text!r}") from None
        hits = db.query_gps(q, GpsFix(gx, gy), cfg["tau"], cfg["k"], strict=True)
    else:
        hits = db.query_knn(q, cfg["k"])
    print("rank,reading_id,trip_id,x,y,heading,distance")
    for r, h in enumerate(hits, start=1):
        p = h.predicted_pose
        print(f"{r},{p.reading_id},{p.trip_id},{p.x:.3f},{p.y:.3f},{p.heading:.2f},{h.embedding_distance:.6f}")
    ws.write_sidecar("query")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pitloc", description="Retrieval-based localization benchmark pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "query":
            p.add_argument("cloud", help="point-cloud file (PITC)")
            p.add_argument("--gps", help="GPS fix as x,y; restricts search to tau metres")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be a non-negative integer")
        cfg = resolve_config(args.config, args.seed, args.set)
        workers = max(1, args.workers)
        if args.command == "query":
            cmd_query(cfg, args.cloud, args.gps, workers=workers)
        else:
            {"synth": cmd_synth, "build-db": cmd_build_db, "train": cmd_train,
             "eval": cmd_eval, "analyze": cmd_analyze}[args.command](cfg, workers=workers)
    except NoCandidatesError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - one-line report for every failure
        msg = " ".join(str(exc).split())
        print(f"error: {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
