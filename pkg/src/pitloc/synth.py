"""Deterministic synthetic city, LiDAR sweep simulator, GPS and metadata.

The world is a square road lattice with box-shaped landmarks (buildings,
poles) lining the roads. Sweeps are ray-cast from a pose; weather degrades
intensities and drops returns, and a requested fraction of returns is
replaced by points on short boxes parked on the road (dynamic clutter).
Every random draw comes from a stream keyed by ``(seed, reading_id)`` so a
reading is reproducible on its own, in any order or process.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .core import Descriptor, GpsFix, PointCloud, Pose

SENSOR_HEIGHT = 1.8
GROUND_REFLECTIVITY = 0.15
CLUTTER_HALF_SIZE = (2.25, 0.9)
CLUTTER_HEIGHT = 1.5

_U64 = (1 << 64) - 1
_PITW_MAGIC = b"PITW"
_PITW_VERSION = 1

METADATA_HEADER = (
    "reading_id", "sun_angle_deg", "precipitation_mm", "visibility_km", "uv_index", "temperature_c",
    "humidity_pct", "cloud_cover_pct", "wind_speed_mps", "image_occlusion_pct", "lidar_occlusion_pct",
    "construction_pct",
)
# metadata column -> ConditionTags attribute
_TAG_COLUMNS = {
    "sun_angle_deg": "sun_angle", "precipitation_mm": "precipitation", "visibility_km": "visibility",
    "uv_index": "uv_index", "temperature_c": "temperature", "humidity_pct": "humidity",
    "cloud_cover_pct": "cloud_cover", "wind_speed_mps": "wind_speed", "image_occlusion_pct": "image_occlusion",
    "lidar_occlusion_pct": "lidar_occlusion", "construction_pct": "construction",
}


def _stream(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & _U64 for k in keys])


@dataclass(frozen=True)
class ConditionTags:
    sun_angle: float = 45.0
    precipitation: float = 0.0
    visibility: float = 10.0
    cloud_cover: float = 0.0
    temperature: float = 15.0
    humidity: float = 50.0
    uv_index: int = 3
    wind_speed: float = 2.0
    lidar_occlusion: float = 0.0
    image_occlusion: float = 0.0
    construction: float = 0.0

    def __post_init__(self):
        for name in ("cloud_cover", "humidity", "lidar_occlusion", "image_occlusion", "construction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must be a percentage in [0, 100], got {v}")
        if self.visibility < 0 or self.precipitation < 0:
            raise ValueError("visibility and precipitation must be non-negative")
        object.__setattr__(self, "uv_index", int(self.uv_index))


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    extent: tuple[float, float] = (600.0, 600.0)
    landmark_count: int = 800
    footprint: tuple[float, float] = (0.3, 6.0)  # half-size range, metres
    height: tuple[float, float] = (2.5, 25.0)
    reflectivity: tuple[float, float] = (0.1, 0.9)
    lattice_pitch: float = 200.0
    road_half_width: float = 5.0
    roadside_fraction: float = 0.85
    setback: tuple[float, float] = (1.0, 14.0)

    def __post_init__(self):
        if self.extent[0] <= 0 or self.extent[1] <= 0 or self.lattice_pitch <= 0:
            raise ValueError("extent and lattice pitch must be positive")
        lo, hi = self.reflectivity
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("reflectivity range must lie within [0, 1]")
        if self.landmark_count < 0:
            raise ValueError("landmark_count must be non-negative")


@dataclass(frozen=True, eq=False)
class World:
    spec: WorldSpec
    landmarks: np.ndarray  # (L, 6): cx, cy, half_x, half_y, height, reflectivity
    road_x: np.ndarray  # x coordinates of north-south roads
    road_y: np.ndarray  # y coordinates of east-west roads

    def __post_init__(self):
        lm = np.array(self.landmarks, dtype=np.float64).reshape(-1, 6)
        lm.setflags(write=False)
        object.__setattr__(self, "landmarks", lm)

    @property
    def extent(self) -> tuple[float, float]:
        return self.spec.extent

    @property
    def road_nodes(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.road_x, self.road_y, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def contains(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.extent[0] and 0.0 <= y <= self.extent[1]

    def to_bytes(self) -> bytes:
        s = self.spec
        head = _PITW_MAGIC + struct.pack(
            "<IQdddd", _PITW_VERSION, s.seed & _U64, s.extent[0], s.extent[1], s.lattice_pitch, s.road_half_width
        )
        head += struct.pack("<QQQ", len(self.road_x), len(self.road_y), len(self.landmarks))
        body = (np.ascontiguousarray(self.road_x, "<f8").tobytes() + np.ascontiguousarray(self.road_y, "<f8").tobytes()
                + np.ascontiguousarray(self.landmarks, "<f8").tobytes())
        return head + body


def world_from_bytes(data: bytes) -> World:
    if data[:4] != _PITW_MAGIC:
        raise ValueError("not a world file (bad magic)")
    version, seed, ex, ey, pitch, rhw = struct.unpack_from("<IQdddd", data, 4)
    if version != _PITW_VERSION:
        raise ValueError(f"unsupported world version {version}")
    nx, ny, nl = struct.unpack_from("<QQQ", data, 48)
    off = 72
    rx = np.frombuffer(data, "<f8", nx, off)
    off += 8 * nx
    ry = np.frombuffer(data, "<f8", ny, off)
    off += 8 * ny
    lm = np.frombuffer(data, "<f8", 6 * nl, off).reshape(nl, 6)
    if off + 48 * nl != len(data):
        raise ValueError("world file length does not match its header")
    spec = WorldSpec(seed=seed, extent=(ex, ey), landmark_count=int(nl), lattice_pitch=pitch, road_half_width=rhw)
    return World(spec, lm.copy(), rx.copy(), ry.copy())


def save_world(world: World, path) -> None:
    with open(path, "wb") as fh:
        fh.write(world.to_bytes())


def load_world(path) -> World:
    with open(path, "rb") as fh:
        return world_from_bytes(fh.read())


def _lattice(extent: float, pitch: float) -> np.ndarray:
    n = int(math.floor(extent / pitch + 1e-9))
    return np.arange(n + 1) * pitch


def _clear_of_roads(cx, cy, hx, hy, road_x, road_y, half_width) -> bool:
    if np.any(np.abs(road_x - cx) < hx + half_width):
        return False
    return not np.any(np.abs(road_y - cy) < hy + half_width)


def generate_world(spec: WorldSpec) -> World:
    """Road lattice plus landmarks, reproducible from ``spec.seed``."""
    rng = _stream(spec.seed, 0x574F524C44)
    ex, ey = spec.extent
    road_x, road_y = _lattice(ex, spec.lattice_pitch), _lattice(ey, spec.lattice_pitch)
    out = []
    attempts = 0
    while len(out) < spec.landmark_count:
        attempts += 1
        if attempts > 200 * max(spec.landmark_count, 1):
            raise RuntimeError("could not place landmarks clear of roads; reduce landmark_count or footprint")
        hx, hy = rng.uniform(*spec.footprint, size=2)
        if rng.random() < spec.roadside_fraction and (len(road_x) or len(road_y)):
            vertical = rng.random() < len(road_x) / (len(road_x) + len(road_y))
            side = rng.choice((-1.0, 1.0))
            back = spec.road_half_width + rng.uniform(*spec.setback)
            if vertical:
                cx = rng.choice(road_x) + side * (back + hx)
                cy = rng.uniform(0.0, ey)
            else:
                cy = rng.choice(road_y) + side * (back + hy)
                cx = rng.uniform(0.0, ex)
        else:
            cx, cy = rng.uniform(0.0, ex), rng.uniform(0.0, ey)
        if not (0.0 <= cx <= ex and 0.0 <= cy <= ey):
            continue
        if not _clear_of_roads(cx, cy, hx, hy, road_x, road_y, spec.road_half_width):
            continue
        out.append((cx, cy, hx, hy, rng.uniform(*spec.height), rng.uniform(*spec.reflectivity)))
    return World(spec, np.array(out).reshape(-1, 6), road_x, road_y)


@dataclass(frozen=True)
class RayPattern:
    """Elevation rings (degrees above horizontal) by azimuth steps."""

    rings: int = 64
    elevation_min: float = -24.8
    elevation_max: float = 2.0
    azimuth_steps: int = 360

    def directions(self, heading_deg: float) -> np.ndarray:
        el = np.radians(np.linspace(self.elevation_min, self.elevation_max, self.rings))
        az = np.radians(heading_deg) + 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        ee, aa = np.meshgrid(el, az, indexing="ij")
        ce = np.cos(ee)
        return np.column_stack([(ce * np.cos(aa)).ravel(), (ce * np.sin(aa)).ravel(), np.sin(ee).ravel()])


HDL64 = RayPattern()


@dataclass(frozen=True)
class SweepConfig:
    pattern: RayPattern = HDL64
    max_range: float = 75.0
    sensor_height: float = SENSOR_HEIGHT
    range_noise: float = 0.02
    clutter_objects: int = 6
    clutter_radius: float = 20.0
    azimuth_jitter: bool = True  # random start azimuth per revolution


def cast_rays(world: World, origin: np.ndarray, dirs: np.ndarray, max_range: float):
    """First hit along each ray: distance (inf on miss) and hit reflectivity."""
    t_best = np.full(dirs.shape[0], np.inf)
    refl = np.zeros(dirs.shape[0])
    down = dirs[:, 2] < 0
    tg = np.full(dirs.shape[0], np.inf)
    tg[down] = -origin[2] / dirs[down, 2]
    ground = tg < max_range
    t_best[ground] = tg[ground]
    refl[ground] = GROUND_REFLECTIVITY

    lm = world.landmarks
    if lm.shape[0]:
        reach = max_range + np.hypot(lm[:, 2], lm[:, 3])
        near = np.hypot(lm[:, 0] - origin[0], lm[:, 1] - origin[1]) < reach
        boxes = lm[near]
    else:
        boxes = lm
    if boxes.shape[0]:
        lo = np.column_stack([boxes[:, 0] - boxes[:, 2], boxes[:, 1] - boxes[:, 3], np.zeros(len(boxes))])
        hi = np.column_stack([boxes[:, 0] + boxes[:, 2], boxes[:, 1] + boxes[:, 3], boxes[:, 4]])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        chunk = max(1, 2_000_000 // boxes.shape[0])
        for s in range(0, dirs.shape[0], chunk):
            iv = inv[s:s + chunk]
            tn = np.full((iv.shape[0], boxes.shape[0]), -np.inf)
            tf = np.full((iv.shape[0], boxes.shape[0]), np.inf)
            for ax in range(3):
                with np.errstate(invalid="ignore"):
                    t1 = (lo[None, :, ax] - origin[ax]) * iv[:, ax, None]
                    t2 = (hi[None, :, ax] - origin[ax]) * iv[:, ax, None]
                # a ray parallel to a slab either always or never lies inside it
                par = ~np.isfinite(iv[:, ax])
                if np.any(par):
                    inside = (origin[ax] >= lo[:, ax]) & (origin[ax] <= hi[:, ax])
                    t1[par] = np.where(inside, -np.inf, np.inf)[None, :]
                    t2[par] = np.where(inside, np.inf, -np.inf)[None, :]
                tn = np.maximum(tn, np.minimum(t1, t2))
                tf = np.minimum(tf, np.maximum(t1, t2))
            hit = (tn <= tf) & (tn > 0.0)
            tn = np.where(hit, tn, np.inf)
            j = tn.argmin(axis=1)
            tmin = tn[np.arange(tn.shape[0]), j]
            better = tmin < np.minimum(t_best[s:s + chunk], max_range)
            sl = np.flatnonzero(better) + s
            t_best[sl] = tmin[better]
            refl[sl] = boxes[j[better], 5]
    t_best[t_best >= max_range] = np.inf
    return t_best, refl


def _clutter_points(rng: np.random.Generator, n: int, cfg: SweepConfig) -> np.ndarray:
    """``n`` points on the sensor-facing faces of boxes parked near the sensor (sensor frame)."""
    if n == 0:
        return np.zeros((0, 3))
    hx, hy = CLUTTER_HALF_SIZE
    m = max(1, cfg.clutter_objects)
    u = rng.uniform(4.0, cfg.clutter_radius, size=m) * rng.choice((-1.0, 1.0), size=m)
    v = rng.choice((-3.0, 3.0), size=m) + rng.uniform(-0.5, 0.5, size=m)
    which = rng.integers(m, size=n)
    pts = np.zeros((n, 3))
    for b in range(m):
        sel = np.flatnonzero(which == b)
        if sel.size == 0:
            continue
        # faces visible from the origin: (axis, coordinate, area)
        faces = [(0, u[b] - hx if u[b] > 0 else u[b] + hx, 2 * hy * CLUTTER_HEIGHT),
                 (1, v[b] - hy if v[b] > 0 else v[b] + hy, 2 * hx * CLUTTER_HEIGHT)]
        areas = np.array([f[2] for f in faces])
        pick = rng.choice(2, size=sel.size, p=areas / areas.sum())
        pts[sel, 0] = rng.uniform(u[b] - hx, u[b] + hx, sel.size)
        pts[sel, 1] = rng.uniform(v[b] - hy, v[b] + hy, sel.size)
        pts[sel, 2] = rng.uniform(0.0, CLUTTER_HEIGHT, sel.size)
        for f, (ax, coord, _) in enumerate(faces):
            pts[sel[pick == f], ax] = coord
    return pts


def dropout_probability(precipitation_mm: float) -> float:
    return min(0.5, 0.015 * precipitation_mm)


def simulate_sweep(world: World, pose: Pose, tags: ConditionTags = ConditionTags(), seed: int = 0,
                   config: SweepConfig = SweepConfig()) -> PointCloud:
    """Ray-cast one sweep in the sensor frame of ``pose``.

    Range is capped by visibility; precipitation darkens and jitters
    intensities and drops returns. Exactly ``round(lidar_occlusion% * M)`` of
    the ``M`` surviving returns are then replaced by clutter points, flagged
    in ``PointCloud.dynamic``.
    """
    if not world.contains(pose.x, pose.y):
        raise ValueError(f"pose ({pose.x:.2f}, {pose.y:.2f}) lies outside the world")
    rng = _stream(seed, pose.reading_id)
    # spinning sensors start each revolution at an arbitrary azimuth
    phase = rng.uniform(0.0, 360.0 / config.pattern.azimuth_steps) if config.azimuth_jitter else 0.0
    dirs = config.pattern.directions(phase)
    h = math.radians(pose.heading)
    c, s = math.cos(h), math.sin(h)
    world_dirs = np.column_stack([c * dirs[:, 0] - s * dirs[:, 1], s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]])
    origin = np.array([pose.x, pose.y, config.sensor_height])
    max_range = min(config.max_range, tags.visibility * 1000.0)
    t, refl = cast_rays(world, origin, world_dirs, max_range)

    hit = np.isfinite(t)
    if config.range_noise > 0:
        t[hit] += rng.normal(0.0, config.range_noise, size=int(hit.sum()))
    # sensor frame keeps world z, so a sensor-frame point is origin + t * (heading-relative direction)
    xyz = dirs[hit] * t[hit, None]
    xyz[:, 2] += config.sensor_height
    refl = refl[hit]

    wet = min(tags.precipitation / 10.0, 1.0)
    noise = rng.normal(0.0, 0.02 + 0.05 * wet, size=refl.shape[0])
    inten = np.clip(refl * (1.0 - 0.4 * wet) + noise, 0.0, 1.0)
    keep = rng.random(refl.shape[0]) >= dropout_probability(tags.precipitation)
    xyz, inten = xyz[keep], inten[keep]

    m = xyz.shape[0]
    n_clutter = int(round(tags.lidar_occlusion / 100.0 * m))
    dynamic = np.zeros(m, dtype=bool)
    if n_clutter:
        replaced = rng.choice(m, size=n_clutter, replace=False)
        xyz[replaced] = _clutter_points(rng, n_clutter, config)
        inten[replaced] = rng.uniform(0.1, 0.9, size=n_clutter)
        dynamic[replaced] = True
    return PointCloud.from_arrays(xyz, inten, dynamic)


@dataclass(frozen=True)
class GpsModel:
    sigma: float = 0.0
    bias_std: float = 0.0

    def __post_init__(self):
        if self.sigma < 0 or self.bias_std < 0:
            raise ValueError("GPS noise parameters must be non-negative")


def calibrate_gps_sigma(target_median: float) -> float:
    """Per-axis sigma whose planar (Rayleigh) error has the given median."""
    if not target_median > 0:
        raise ValueError("target median must be positive")
    return target_median / math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class TripSpec:
    trip_id: int
    path: tuple[tuple[float, float], ...]
    spacing: float = 1.0
    conditions: ConditionTags = ConditionTags()
    start_offset: float = 0.0
    start_time: float = 0.0
    speed: float = 10.0
    drift: float = 0.0  # amplitude (percentage points) of occlusion drift along the trip
    lateral_offset: float = 0.0  # metres to the left of the path
    yaw_wobble: float = 0.0  # amplitude in degrees of a smooth heading oscillation

    def __post_init__(self):
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if len(self.path) < 2:
            raise ValueError("path needs at least two waypoints")
        object.__setattr__(self, "path", tuple((float(x), float(y)) for x, y in self.path))


def offset_path(path: Sequence[tuple[float, float]], lateral: float) -> np.ndarray:
    """Polyline shifted ``lateral`` metres to its left (mitred corners)."""
    pts = np.asarray(path, dtype=np.float64)
    if lateral == 0.0:
        return pts
    seg = np.diff(pts, axis=0)
    nrm = np.column_stack([-seg[:, 1], seg[:, 0]]) / np.hypot(seg[:, 0], seg[:, 1])[:, None]
    closed = np.allclose(pts[0], pts[-1])
    out = np.empty_like(pts)
    for i in range(len(pts)):
        if i == 0 or i == len(pts) - 1:
            a = nrm[-1] if closed else nrm[min(i, len(nrm) - 1)]
            b = nrm[0] if closed else a
        else:
            a, b = nrm[i - 1], nrm[i]
        m = a + b
        m = m / np.dot(m, a)  # mitre so both adjacent segments move by exactly `lateral`
        out[i] = pts[i] + lateral * m
    return out


def sample_path(path: Sequence[tuple[float, float]], spacing: float, offset: float = 0.0):
    """Positions every ``spacing`` metres along a polyline and the tangent heading at each."""
    pts = np.asarray(path, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    if np.any(seg_len == 0):
        raise ValueError("path has repeated waypoints")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    n = int(math.floor((total - offset) / spacing + 1e-9)) + 1
    s = offset + spacing * np.arange(max(n, 0))
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    xy = pts[k] + frac[:, None] * seg[k]
    heading = np.degrees(np.arctan2(seg[k, 1], seg[k, 0]))
    return xy, heading, s


class SweepSequence(Sequence):
    """Lazily simulated clouds for a trip; each element is reproducible on its own."""

    def __init__(self, world, poses, tags, seed, config):
        self.world, self.poses, self.tags, self.seed, self.config = world, poses, tags, seed, config

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return simulate_sweep(self.world, self.poses[i], self.tags[i], self.seed, self.config)


@dataclass
class TripData:
    poses: list[Pose]
    clouds: SweepSequence
    gps: list[GpsFix]
    tags: list[ConditionTags]

    def metadata_rows(self) -> list[dict]:
        return [metadata_row(p.reading_id, t) for p, t in zip(self.poses, self.tags)]


def metadata_row(reading_id: int, tags: ConditionTags) -> dict:
    row = {"reading_id": reading_id}
    for col, attr in _TAG_COLUMNS.items():
        row[col] = getattr(tags, attr)
    return row


READING_STRIDE = 1_000_000


def simulate_trip(world: World, trip: TripSpec, gps: GpsModel = GpsModel(), seed: int = 0,
                  config: SweepConfig = SweepConfig()) -> TripData:
    """Poses every ``spacing`` metres along the path, with GPS fixes, tags and lazy sweeps."""
    xy, heading, s = sample_path(offset_path(trip.path, trip.lateral_offset), trip.spacing, trip.start_offset)
    if len(xy) >= READING_STRIDE:
        raise ValueError("trip too long for the reading-id scheme")
    base = trip.trip_id * READING_STRIDE
    trip_rng = _stream(seed, trip.trip_id, 0x47505342)
    bias = trip_rng.normal(0.0, gps.bias_std, size=2) if gps.bias_std > 0 else np.zeros(2)
    phase = trip_rng.uniform(0.0, 2.0 * math.pi)
    if trip.yaw_wobble:
        yaw_phase = trip_rng.uniform(0.0, 2.0 * math.pi, size=2)
        heading = heading + trip.yaw_wobble * (0.6 * np.sin(2.0 * math.pi * s / 37.0 + yaw_phase[0])
                                               + 0.4 * np.sin(2.0 * math.pi * s / 11.0 + yaw_phase[1]))
    poses = [
        Pose(x, y, hd, trip.trip_id, trip.start_time + si / trip.speed, base + i)
        for i, ((x, y), hd, si) in enumerate(zip(xy, heading, s))
    ]
    fixes = []
    for p in poses:
        r = _stream(seed, p.reading_id, 0x475053)
        e = r.normal(0.0, gps.sigma, size=2) if gps.sigma > 0 else np.zeros(2)
        fixes.append(GpsFix(p.x + bias[0] + e[0], p.y + bias[1] + e[1]))
    tags = []
    base_tags = trip.conditions
    for si in s:
        if trip.drift:
            wobble = trip.drift * math.sin(2.0 * math.pi * si / 500.0 + phase)
            tags.append(replace(
                base_tags,
                lidar_occlusion=float(np.clip(base_tags.lidar_occlusion + wobble, 0.0, 100.0)),
                image_occlusion=float(np.clip(base_tags.image_occlusion + wobble, 0.0, 100.0)),
            ))
        else:
            tags.append(base_tags)
    return TripData(poses, SweepSequence(world, poses, tags, seed, config), fixes, tags)


def lattice_loop(world: World, i0: int, j0: int, blocks_x: int = 1, blocks_y: int = 1,
                 clockwise: bool = False) -> tuple[tuple[float, float], ...]:
    """Closed rectangular route along road lines, starting at lattice node ``(i0, j0)``."""
    x0, x1 = world.road_x[i0], world.road_x[i0 + blocks_x]
    y0, y1 = world.road_y[j0], world.road_y[j0 + blocks_y]
    loop = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    if clockwise:
        loop.reverse()
    return tuple(loop)


@dataclass(frozen=True)
class DegradationHook:
    """Optional descriptor noise driven by condition tags (off by default).

    Adds isotropic Gaussian noise of std ``low_sun_noise`` when the sun is below
    ``low_sun_angle`` degrees and ``occlusion_noise`` when the occlusion tag
    falls in ``occlusion_band`` (left-closed, right-open).
    """

    low_sun_noise: float = 0.0
    low_sun_angle: float = 10.0
    occlusion_noise: float = 0.0
    occlusion_band: tuple[float, float] = (15.0, 20.0)
    occlusion_field: str = "lidar_occlusion"

    def noise_level(self, tags: ConditionTags) -> float:
        level = 0.0
        if abs(tags.sun_angle) < self.low_sun_angle:
            level += self.low_sun_noise
        occ = getattr(tags, self.occlusion_field)
        if self.occlusion_band[0] <= occ < self.occlusion_band[1]:
            level += self.occlusion_noise
        return level


def apply_degradation(descriptor: Descriptor, tags: ConditionTags, hook: DegradationHook,
                      rng: np.random.Generator) -> Descriptor:
    level = hook.noise_level(tags)
    if level <= 0 or not descriptor.valid:
        return descriptor
    noisy = descriptor.values + rng.normal(0.0, level, size=descriptor.dim)
    return Descriptor.normalized(noisy)


def write_metadata(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METADATA_HEADER)
        for row in rows:
            w.writerow([row["reading_id"]] + [repr(row[c]) for c in METADATA_HEADER[1:]])


def read_metadata(path) -> dict[int, ConditionTags]:
    out: dict[int, ConditionTags] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METADATA_HEADER:
            raise ValueError(f"{path}: bad metadata header {reader.fieldnames!r}")
        for row in reader:
            kw = {attr: float(row[col]) for col, attr in _TAG_COLUMNS.items()}
            kw["uv_index"] = int(kw["uv_index"])
            out[int(row["reading_id"])] = ConditionTags(**kw)
    return out


def write_gps(path, poses: Sequence[Pose], fixes: Sequence[GpsFix]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("reading_id", "gps_x", "gps_y"))
        for p, g in zip(poses, fixes):
            w.writerow([p.reading_id, repr(g.x), repr(g.y)])


def read_gps(path) -> dict[int, GpsFix]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ("reading_id", "gps_x", "gps_y"):
            raise ValueError(f"{path}: bad GPS header {reader.fieldnames!r}")
        return {int(r["reading_id"]): GpsFix(float(r["gps_x"]), float(r["gps_y"])) for r in reader}


def tags_field_names() -> list[str]:
    return [f.name for f in fields(ConditionTags)]


def tags_as_dict(tags: ConditionTags) -> dict:
    return asdict(tags)
