"""
Global descriptors
==================

Two ways to summarize a BEV grid as one unit vector: a learned embedding head
on pooled grid statistics, and a classical vocabulary with VLAD pooling.
"""

# %%
import numpy as np

from pitloc.bev import grid_preset, voxelize
from pitloc.core import PointCloud
from pitloc.descriptor import EmbeddingModel, bev_feature_vector, bev_local_features, embed, kmeans_fit, vlad_pool

rng = np.random.default_rng(1)
spec = grid_preset("desk")


def random_grid(seed):
    r = np.random.default_rng(seed)
    xyz = r.uniform([-24, -16, 0], [24, 16, 8], size=(5000, 3))
    return voxelize(PointCloud.from_arrays(xyz, r.random(5000)), spec)


grids = [random_grid(s) for s in range(6)]

# %%
# Pooled statistics: two values per channel plus a coarse occupancy layout.
x = bev_feature_vector(grids[0])
print("feature length:", x.shape[0])

# %%
# A random-init embedding head maps features to a 256-d unit vector.
model = EmbeddingModel.random(x.shape[0], 256, 256, seed=0)
d = embed(grids[0], model)
print("descriptor dim:", d.dim, "norm:", round(float(np.linalg.norm(d.values)), 12))

# %%
# Classical baseline: k-means over local patch features, then VLAD.
local = np.vstack([bev_local_features(g) for g in grids])
vocab = kmeans_fit(local, k=8, seed=0)
print("distortion per iteration:", np.round(vocab.distortion_history, 2))
v = vlad_pool(bev_local_features(grids[0]), vocab)
print("VLAD dim:", v.dim, "valid:", v.valid)
