"""Synthetic benchmark assembly: world, trips, features, split."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bev import DEFAULT_Z_CUT, GridSpec, grid_preset, remove_ground, voxelize
from .core import GpsFix, PointCloud, Pose
from .descriptor import EmbeddingModel, bev_feature_vector, feature_dim
from .evaluate import EvalSplit, make_split
from .synth import (
    ConditionTags,
    GpsModel,
    RayPattern,
    SweepConfig,
    TripData,
    TripSpec,
    World,
    WorldSpec,
    _stream,
    calibrate_gps_sigma,
    generate_world,
    lattice_loop,
    simulate_sweep,
    simulate_trip,
)

BENCH_PATTERN = RayPattern(rings=32, elevation_min=-15.0, elevation_max=15.0, azimuth_steps=180)


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 7
    extent: float = 600.0
    pitch: float = 200.0
    landmarks: int = 300
    trips: int = 8
    loop_blocks: tuple[int, int] = (1, 1)
    spacing: float = 1.4
    grid: str = "desk"
    max_range: float = 40.0
    rings: int = 32
    azimuth_steps: int = 180
    elevation_min: float = -15.0
    elevation_max: float = 15.0
    clutter_objects: int = 24
    max_occlusion: float = 70.0
    max_precipitation: float = 25.0
    min_visibility: float = 0.02
    gps_median: float = 3.40
    gps_bias_std: float = 0.5
    n_queries: int = 200
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    z_cut: float = DEFAULT_Z_CUT
    spacing_jitter: float = 0.1  # relative
    max_lateral_offset: float = 0.5
    yaw_wobble: float = 1.5

    @property
    def sweep(self) -> SweepConfig:
        return SweepConfig(
            RayPattern(self.rings, self.elevation_min, self.elevation_max, self.azimuth_steps),
            max_range=self.max_range, clutter_objects=self.clutter_objects,
        )

    @property
    def grid_spec(self) -> GridSpec:
        return grid_preset(self.grid)


def trip_conditions(seed: int, trip_id: int, cfg: BenchmarkConfig) -> ConditionTags:
    """Per-trip weather and clutter drawn from a trip-keyed stream."""
    r = _stream(seed, trip_id, 0x434F4E44)
    rain = r.random() < 0.5
    fog = r.random() < 0.25
    return ConditionTags(
        sun_angle=float(r.uniform(-10.0, 60.0)),
        precipitation=float(r.uniform(0.5, cfg.max_precipitation)) if rain else 0.0,
        visibility=float(r.uniform(cfg.min_visibility, 0.08)) if fog else float(r.uniform(5.0, 10.0)),
        cloud_cover=float(r.uniform(0.0, 100.0)),
        temperature=float(r.uniform(-5.0, 30.0)),
        humidity=float(r.uniform(20.0, 100.0)),
        uv_index=int(r.integers(0, 9)),
        wind_speed=float(r.uniform(0.0, 12.0)),
        lidar_occlusion=float(r.uniform(0.0, cfg.max_occlusion)),
        image_occlusion=float(r.uniform(0.0, cfg.max_occlusion)),
        construction=float(r.uniform(0.0, 10.0)),
    )


def trip_specs(world: World, cfg: BenchmarkConfig) -> list[TripSpec]:
    bx, by = cfg.loop_blocks
    nx, ny = len(world.road_x) - 1, len(world.road_y) - 1
    i0, j0 = max(0, (nx - bx) // 2), max(0, (ny - by) // 2)
    if i0 + bx > nx or j0 + by > ny:
        raise ValueError(f"loop of {bx}x{by} blocks does not fit a {nx}x{ny} block lattice")
    path = lattice_loop(world, i0, j0, bx, by)
    xs, ys = zip(*path)
    margin = cfg.max_lateral_offset
    if min(xs) - margin < 0 or min(ys) - margin < 0 or max(xs) + margin > cfg.extent or max(ys) + margin > cfg.extent:
        raise ValueError("route runs along the world edge; use a larger extent or a smaller pitch")
    out = []
    for t in range(1, cfg.trips + 1):
        r = _stream(cfg.seed, t, 0x5452495)
        spacing = cfg.spacing * float(r.uniform(1.0 - cfg.spacing_jitter, 1.0 + cfg.spacing_jitter))
        out.append(TripSpec(
            trip_id=t, path=path, spacing=spacing, conditions=trip_conditions(cfg.seed, t, cfg),
            start_offset=float(r.uniform(0.0, spacing)), start_time=3600.0 * t,
            lateral_offset=float(r.uniform(-cfg.max_lateral_offset, cfg.max_lateral_offset)),
            yaw_wobble=cfg.yaw_wobble,
        ))
    return out


def cloud_features(cloud: PointCloud, grid: GridSpec, z_cut: float = DEFAULT_Z_CUT) -> np.ndarray:
    return bev_feature_vector(voxelize(remove_ground(cloud, z_cut), grid))


def _features_job(args):
    world, poses, tags, seed, sweep, grid, z_cut = args
    return [cloud_features(simulate_sweep(world, p, t, seed, sweep), grid, z_cut) for p, t in zip(poses, tags)]


def trip_features(world: World, trip: TripData, seed: int, sweep: SweepConfig, grid: GridSpec,
                  z_cut: float = DEFAULT_Z_CUT, workers: int = 1) -> np.ndarray:
    """BEV feature rows for every reading of a trip; identical for any ``workers``."""
    n = len(trip.poses)
    if workers <= 1 or n < 64:
        rows = _features_job((world, trip.poses, trip.tags, seed, sweep, grid, z_cut))
    else:
        bounds = np.linspace(0, n, workers * 4 + 1).astype(int)
        jobs = [(world, trip.poses[a:b], trip.tags[a:b], seed, sweep, grid, z_cut)
                for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = [r for chunk in ex.map(_features_job, jobs) for r in chunk]
    return np.array(rows, dtype=np.float64).reshape(n, -1)


@dataclass
class Benchmark:
    config: BenchmarkConfig
    world: World
    trips: list[TripData]
    poses: dict[int, Pose]
    features: dict[int, np.ndarray]
    gps: dict[int, GpsFix]
    tags: dict[int, ConditionTags]
    split: EvalSplit
    extra: dict = field(default_factory=dict)

    def ids_for_trips(self, trips) -> list[int]:
        keep = set(trips)
        return sorted(i for i, p in self.poses.items() if p.trip_id in keep)

    @property
    def train_ids(self) -> list[int]:
        return self.ids_for_trips(self.split.train_trips)

    @property
    def val_ids(self) -> list[int]:
        return self.ids_for_trips(self.split.val_trips)

    @property
    def database_ids(self) -> list[int]:
        return self.ids_for_trips(self.split.database_trips)

    def feature_stats(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.array([self.features[i] for i in self.train_ids])
        return X.mean(axis=0), X.std(axis=0)

    def initial_model(self, hidden: int = 256, output: int = 256, seed: int | None = None,
                      standardize: bool = False) -> EmbeddingModel:
        """Random-init model; the untrained baseline uses raw inputs unless ``standardize``."""
        mean, std = self.feature_stats() if standardize else (None, None)
        return EmbeddingModel.random(feature_dim(self.config.grid_spec.c), hidden, output,
                                     self.config.seed if seed is None else seed, mean, std)


def build_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), workers: int = 1) -> Benchmark:
    world = generate_world(WorldSpec(seed=cfg.seed, extent=(cfg.extent, cfg.extent), landmark_count=cfg.landmarks,
                                     lattice_pitch=cfg.pitch))
    gps_model = GpsModel(calibrate_gps_sigma(cfg.gps_median), cfg.gps_bias_std)
    trips, poses, feats, gps, tags = [], {}, {}, {}, {}
    grid = cfg.grid_spec
    for spec in trip_specs(world, cfg):
        td = simulate_trip(world, spec, gps_model, cfg.seed, cfg.sweep)
        X = trip_features(world, td, cfg.seed, cfg.sweep, grid, cfg.z_cut, workers)
        trips.append(td)
        for p, g, t, x in zip(td.poses, td.gps, td.tags, X):
            poses[p.reading_id] = p
            gps[p.reading_id] = g
            tags[p.reading_id] = t
            feats[p.reading_id] = x
    split = make_split(list(poses.values()), cfg.split, cfg.seed, cfg.n_queries)
    return Benchmark(cfg, world, trips, poses, feats, gps, tags, split)
