"""
Bird's-eye-view voxelization
============================

A sweep is cropped of ground returns, then binned into an ``l x w x c`` grid
whose vertical slices become channels. Each cell keeps a point count and a
mean intensity.
"""

# %%
import numpy as np

from pitloc.bev import grid_preset, remove_ground, voxel_downsample, voxelize
from pitloc.core import PointCloud

rng = np.random.default_rng(0)
xyz = np.column_stack([rng.uniform(-20, 20, 20_000), rng.uniform(-12, 12, 20_000), rng.uniform(-0.2, 6.0, 20_000)])
cloud = PointCloud.from_arrays(xyz, rng.random(20_000))

# %%
# The named presets give the grid shapes directly.
for name in ("oxford", "pit30m", "desk"):
    print(f"{name:7s}", grid_preset(name).shape)

# %%
# Points at or below the ground cut are removed before binning.
above = remove_ground(cloud)
grid = voxelize(above, grid_preset("oxford"))
print("points kept:", len(above), "binned:", int(grid.occupancy.sum()), "outside grid:", grid.dropped)

# %%
# Occupied cells per height channel; the synthetic points fill the lower 6 m.
print(np.count_nonzero(grid.occupancy, axis=(0, 1)))

# %%
# A voxel-centroid downsample picks the cell size that keeps at most 4096 points.
small = voxel_downsample(cloud)
print("downsampled to", len(small), "points")
