"""Domain types and planar geometry shared across the package.

Positions live in a local planar (east, north) frame in metres. Headings are
degrees counter-clockwise from east, normalized to ``[0, 360)``. Sensor-frame
coordinates have +x pointing along the heading and keep the world z axis, so
the ground plane sits at ``z = 0`` in both frames.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

POSE_CSV_HEADER = ("reading_id", "trip_id", "timestamp", "x", "y", "heading")


def normalize_heading(degrees: float) -> float:
    h = math.fmod(float(degrees), 360.0)
    if h < 0.0:
        h += 360.0
    # fmod of a tiny negative value can land exactly on 360.0
    return 0.0 if h >= 360.0 else h


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0
    trip_id: int = 0
    timestamp: float = 0.0
    reading_id: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError(f"non-finite pose for reading {self.reading_id}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "heading", normalize_heading(self.heading))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "trip_id", int(self.trip_id))
        object.__setattr__(self, "reading_id", int(self.reading_id))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class GpsFix:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("non-finite GPS fix")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Sensor-frame points as an ``(N, 4)`` array of ``x, y, z, intensity``.

    ``dynamic`` optionally flags points that belong to transient objects; it is
    known exactly for simulated sweeps and ``None`` for clouds read from disk.
    """

    points: np.ndarray
    dynamic: np.ndarray | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 4)
        if not np.all(np.isfinite(pts[:, :3])):
            raise ValueError("point cloud contains non-finite coordinates")
        pts[:, 3] = np.clip(np.nan_to_num(pts[:, 3], nan=0.0), 0.0, 1.0)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.dynamic is not None:
            dyn = np.array(self.dynamic, dtype=bool, copy=True).reshape(-1)
            if dyn.shape[0] != pts.shape[0]:
                raise ValueError("dynamic mask length does not match point count")
            dyn.setflags(write=False)
            object.__setattr__(self, "dynamic", dyn)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    @classmethod
    def from_arrays(cls, xyz, intensity, dynamic=None) -> "PointCloud":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        intensity = np.asarray(intensity, dtype=np.float64).reshape(-1, 1)
        return cls(np.hstack([xyz, intensity]), dynamic)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, mask_or_index) -> "PointCloud":
        dyn = None if self.dynamic is None else self.dynamic[mask_or_index]
        return PointCloud(self.points[mask_or_index], dyn)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.points.shape != other.points.shape or not np.array_equal(self.points, other.points):
            return False
        if (self.dynamic is None) != (other.dynamic is None):
            return False
        return self.dynamic is None or np.array_equal(self.dynamic, other.dynamic)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Descriptor:
    """Fixed-length embedding vector.

    Use :meth:`normalized` to build one from a raw vector. A zero vector cannot
    be normalized; it is kept as-is and flagged ``valid=False`` so databases can
    exclude it from search.
    """

    values: np.ndarray
    valid: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def normalized(cls, vector) -> "Descriptor":
        v = np.asarray(vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor contains non-finite values")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            return cls(np.zeros_like(v), valid=False)
        return cls(v / norm, valid=True)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.dim

    def __eq__(self, other) -> bool:
        if not isinstance(other, Descriptor):
            return NotImplemented
        return self.valid == other.valid and np.array_equal(self.values, other.values)

    __hash__ = None


def geo_distance(a, b) -> float:
    """Horizontal Euclidean distance between two poses (or GPS fixes)."""
    return math.hypot(a.x - b.x, a.y - b.y)


def heading_delta(a: float, b: float) -> float:
    """Smallest absolute angular difference in degrees, in ``[0, 180]``."""
    d = abs(normalize_heading(a) - normalize_heading(b))
    return 360.0 - d if d > 180.0 else d


def _rotation(heading_deg: float) -> tuple[float, float]:
    t = math.radians(heading_deg)
    return math.cos(t), math.sin(t)


def to_sensor_frame(world_point, pose: Pose) -> tuple[float, float, float]:
    """Express a world point in the sensor frame of ``pose``."""
    c, s = _rotation(pose.heading)
    dx = world_point[0] - pose.x
    dy = world_point[1] - pose.y
    return (c * dx + s * dy, -s * dx + c * dy, float(world_point[2]))


def to_world_frame(sensor_point, pose: Pose) -> tuple[float, float, float]:
    """Inverse of :func:`to_sensor_frame`."""
    c, s = _rotation(pose.heading)
    sx, sy = sensor_point[0], sensor_point[1]
    return (pose.x + c * sx - s * sy, pose.y + s * sx + c * sy, float(sensor_point[2]))


def points_to_sensor_frame(xyz: np.ndarray, pose: Pose) -> np.ndarray:
    """Vectorized :func:`to_sensor_frame` over an ``(N, 3)`` array."""
    c, s = _rotation(pose.heading)
    xyz = np.asarray(xyz, dtype=np.float64)
    dx = xyz[:, 0] - pose.x
    dy = xyz[:, 1] - pose.y
    return np.column_stack([c * dx + s * dy, -s * dx + c * dy, xyz[:, 2]])


def points_to_world_frame(xyz: np.ndarray, pose: Pose) -> np.ndarray:
    c, s = _rotation(pose.heading)
    xyz = np.asarray(xyz, dtype=np.float64)
    return np.column_stack(
        [pose.x + c * xyz[:, 0] - s * xyz[:, 1], pose.y + s * xyz[:, 0] + c * xyz[:, 1], xyz[:, 2]]
    )


def write_pose_table(path, poses: Iterable[Pose]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_CSV_HEADER)
        for p in poses:
            w.writerow([p.reading_id, p.trip_id, repr(p.timestamp), repr(p.x), repr(p.y), repr(p.heading)])


def read_pose_table(path) -> list[Pose]:
    """Read a pose CSV, checking the header and per-trip time ordering."""
    poses: list[Pose] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != POSE_CSV_HEADER:
            raise ValueError(f"{path}: bad pose table header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rid, tid, ts, x, y, hd = row
                poses.append(Pose(float(x), float(y), float(hd), int(tid), float(ts), int(rid)))
            except ValueError as exc:
                raise ValueError(f"{Path(path).name}:{lineno}: {exc}") from None
    check_pose_table(poses)
    return poses


def check_pose_table(poses: Sequence[Pose]) -> None:
    seen: set[int] = set()
    last_ts: dict[int, float] = {}
    for p in poses:
        if p.reading_id in seen:
            raise ValueError(f"duplicate identifier: reading {p.reading_id}")
        seen.add(p.reading_id)
        prev = last_ts.get(p.trip_id)
        if prev is not None and not p.timestamp > prev:
            raise ValueError(f"timestamps not increasing in trip {p.trip_id} at reading {p.reading_id}")
        last_ts[p.trip_id] = p.timestamp
