"""Point-cloud preprocessing and bird's-eye-view voxelization."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import PointCloud

log = logging.getLogger(__name__)

DEFAULT_Z_CUT = 0.3

_PITC_MAGIC = b"PITC"
_PITC_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Voxel volume centred on the sensor in x and y.

    Cell counts are ``round(extent / xy_resolution)``. Extents that are not an
    exact multiple of the resolution are accepted with an informational log line; the
    volume then spans ``cells * xy_resolution`` metres.
    """

    x_extent: float
    y_extent: float
    xy_resolution: float
    z_extent: float
    channels: int
    z_offset: float = -0.5

    def __post_init__(self):
        if self.xy_resolution <= 0 or self.x_extent <= 0 or self.y_extent <= 0:
            raise ValueError("extents and resolution must be positive")
        if self.z_extent <= 0:
            raise ValueError("z_extent must be positive")
        if int(self.channels) < 1:
            raise ValueError("channels must be >= 1")
        for name, ext in (("x", self.x_extent), ("y", self.y_extent)):
            ratio = ext / self.xy_resolution
            if round(ratio) < 1:
                raise ValueError(f"{name} extent smaller than one cell")
            if abs(ratio - round(ratio)) > 1e-9:
                log.info(
                    "%s extent %.3f m is not a multiple of %.3f m; using %d cells",
                    name, ext, self.xy_resolution, round(ratio),
                )

    @property
    def l(self) -> int:
        return int(round(self.x_extent / self.xy_resolution))

    @property
    def w(self) -> int:
        return int(round(self.y_extent / self.xy_resolution))

    @property
    def c(self) -> int:
        return int(self.channels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.l, self.w, self.c)

    @property
    def z_resolution(self) -> float:
        return self.z_extent / self.channels


# 40 m x 25 m at 8 px/m, 10 m of height in 16 channels
OXFORD = GridSpec(40.0, 25.0, 0.125, 10.0, 16)
# 200 m x 125 m at 2.4 m/px, 3.2 m of height in 16 channels; extents do not divide evenly
PIT30M = GridSpec(200.0, 125.0, 2.4, 3.2, 16)
# desk-scale grid used by the synthetic benchmark
DESK = GridSpec(48.0, 32.0, 0.5, 10.0, 16)

PRESETS = {"oxford": OXFORD, "pit30m": PIT30M, "desk": DESK}


def grid_preset(name: str) -> GridSpec:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown grid preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True, eq=False)
class BEVGrid:
    spec: GridSpec
    occupancy: np.ndarray
    mean_intensity: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if self.occupancy.shape != self.spec.shape or self.mean_intensity.shape != self.spec.shape:
            raise ValueError("grid arrays do not match spec shape")
        self.occupancy.setflags(write=False)
        self.mean_intensity.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.spec.shape


def remove_ground(cloud: PointCloud, z_cut: float = DEFAULT_Z_CUT) -> PointCloud:
    """Keep points strictly above ``z_cut`` (sensor frame, ground at z=0)."""
    return cloud.subset(cloud.points[:, 2] > z_cut)


def _voxel_keys(xyz: np.ndarray, origin: np.ndarray, size: float) -> np.ndarray:
    idx = np.floor((xyz - origin) / size).astype(np.int64)
    return np.ascontiguousarray(idx)


def _count_voxels(xyz, origin, size) -> int:
    keys = _voxel_keys(xyz, origin, size)
    return np.unique(keys, axis=0).shape[0]


def downsample_voxel_size(cloud: PointCloud, target: int = 4096, iterations: int = 40) -> float:
    """Voxel edge length whose occupied-voxel count is the largest found not exceeding ``target``.

    Geometric bisection between a size that holds the whole cloud in one
    voxel and one a million times smaller. The grid is anchored at the
    cloud's minimum corner.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    xyz = cloud.xyz
    origin = xyz.min(axis=0)
    span = float((xyz.max(axis=0) - origin).max())
    hi = span * (1.0 + 1e-9) + 1e-12  # one voxel holds everything
    lo = hi / 1e6
    best_size, best_count = hi, 1
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        count = _count_voxels(xyz, origin, mid)
        if count > target:
            lo = mid
        else:
            hi = mid
            if count > best_count:
                best_size, best_count = mid, count
        if count == target:
            break
    return best_size


def voxel_downsample(cloud: PointCloud, target: int = 4096, iterations: int = 40) -> PointCloud:
    """Downsample to at most ``target`` points with a coarse voxel filter.

    The voxel size comes from :func:`downsample_voxel_size`. Each occupied
    voxel becomes one point at its centroid carrying the mean intensity.
    Clouds already within budget are returned unchanged.
    """
    if target < 1:
        raise ValueError("target must be >= 1")
    if len(cloud) <= target:
        return cloud
    size = downsample_voxel_size(cloud, target, iterations)
    keys = _voxel_keys(cloud.xyz, cloud.xyz.min(axis=0), size)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = counts.shape[0]
    out = np.zeros((m, 4))
    for col in range(4):
        out[:, col] = np.bincount(inverse, weights=cloud.points[:, col], minlength=m) / counts
    return PointCloud(out)


def voxel_indices(cloud: PointCloud, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Flat voxel index of every in-bounds point plus the in-bounds mask.

    Cells are left-closed and right-open: a coordinate exactly on the upper
    face of the volume is out of bounds.
    """
    pts = cloud.points
    l, w, c = spec.shape
    # centred on the sensor over the cells actually used, which may differ from the nominal extent
    ix = np.floor((pts[:, 0] + 0.5 * l * spec.xy_resolution) / spec.xy_resolution)
    iy = np.floor((pts[:, 1] + 0.5 * w * spec.xy_resolution) / spec.xy_resolution)
    iz = np.floor((pts[:, 2] - spec.z_offset) / spec.z_resolution)
    inside = (ix >= 0) & (ix < l) & (iy >= 0) & (iy < w) & (iz >= 0) & (iz < c)
    flat = (ix[inside].astype(np.int64) * w + iy[inside].astype(np.int64)) * c + iz[inside].astype(np.int64)
    return flat, inside


def voxelize(cloud: PointCloud, spec: GridSpec) -> BEVGrid:
    """Bin points into an ``l x w x c`` grid of counts and mean intensities."""
    flat, inside = voxel_indices(cloud, spec)
    size = spec.l * spec.w * spec.c
    inten = cloud.points[inside, 3]
    occ = np.bincount(flat, minlength=size)
    total = np.bincount(flat, weights=inten, minlength=size)
    mean = np.zeros(size)
    hit = occ > 0
    mean[hit] = total[hit] / occ[hit]
    if flat.size:
        # rounding in sum/count can leave the mean one ulp outside the contributing range
        lo = np.full(size, np.inf)
        hi = np.full(size, -np.inf)
        np.minimum.at(lo, flat, inten)
        np.maximum.at(hi, flat, inten)
        mean[hit] = np.clip(mean[hit], lo[hit], hi[hit])
    return BEVGrid(
        spec,
        occ.reshape(spec.shape).astype(np.int32),
        mean.reshape(spec.shape),
        dropped=int(len(cloud) - flat.size),
    )


def write_cloud(path, cloud: PointCloud) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_PITC_MAGIC)
        fh.write(struct.pack("<IQ", _PITC_VERSION, pts.shape[0]))
        fh.write(pts.tobytes())


def read_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != _PITC_MAGIC:
        raise ValueError(f"{path}: not a point-cloud file (bad magic)")
    version, count = struct.unpack_from("<IQ", data, 4)
    if version != _PITC_VERSION:
        raise ValueError(f"{path}: unsupported point-cloud version {version}")
    expected = 16 + 16 * count
    if len(data) != expected:
        raise ValueError(f"{path}: truncated point-cloud file ({len(data)} of {expected} bytes)")
    pts = np.frombuffer(data, dtype="<f4", offset=16).reshape(count, 4).astype(np.float64)
    return PointCloud(pts)
