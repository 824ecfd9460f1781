"""
Mining triplets and training the embedding
==========================================

Positives lie within 1 m of the anchor on another trip, negatives 2 to 4 m
away, all within 30 degrees of heading. The embedding head is trained with a
triplet or lazy quadruplet hinge and Adam.
"""

# %%
import numpy as np

from pitloc.learn import MiningRules, TrainConfig, TrainingSet, lazy_quadruplet_loss, mine_triplets, train, triplet_loss
from pitloc.scenario import BenchmarkConfig, build_benchmark

# %%
# The losses on a tiny example: the hinge is active when the positive is not
# at least one margin closer than the negative.
a, p, n = np.array([1.0, 0.0]), np.array([0.8, 0.6]), np.array([0.6, 0.8])
print("triplet loss:", round(triplet_loss(a, p, n, 0.5)[0], 4))
print("lazy quadruplet:", round(lazy_quadruplet_loss(a, [p], [n, -a], np.array([0.0, -1.0]), 0.5, 0.25)[0], 4))

# %%
# A reduced benchmark keeps the demo quick.
cfg = BenchmarkConfig(extent=400.0, pitch=100.0, trips=5, landmarks=150, rings=16, azimuth_steps=90, n_queries=50)
bench = build_benchmark(cfg)
train_poses = [bench.poses[i] for i in bench.train_ids]
res = mine_triplets(train_poses, MiningRules(), count=1000, seed=0)
print(f"{len(res)} triplets mined, {res.skipped} anchors skipped")

# %%
# Train from random init and watch validation recall within 1 m.
model0 = bench.initial_model(hidden=64, output=64)
data = TrainingSet(bench.poses, bench.features, bench.train_ids, bench.val_ids, bench.train_ids)
model, log = train(model0, data, MiningRules(), TrainConfig(mode="quadruplet", max_iterations=300,
                                                              cache_refresh_interval=100))
print("validation recall@1m before:", round(log.initial_val_recall, 1))
for row in log.rows:
    print(row)
