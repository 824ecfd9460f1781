"""
Scoring a localizer
===================

Queries come from held-out trips. Each method predicts a pose; the report
gives the share of queries within several distances, mean and median error,
and recall at 1 and at the top 1% within 25 m.
"""

# %%
from pitloc.core import Descriptor
from pitloc.evaluate import RetrievalMethod, run_benchmark
from pitloc.index import build_database
from pitloc.scenario import BenchmarkConfig, build_benchmark

cfg = BenchmarkConfig(extent=400.0, pitch=100.0, trips=5, landmarks=150, rings=16, azimuth_steps=90, n_queries=50)
bench = build_benchmark(cfg)
model = bench.initial_model(hidden=64, output=64)
print("train/val/test trips:", bench.split.train_trips, bench.split.val_trips, bench.split.test_trips)

# %%
# Database from train and validation trips, queries from the test trip.
ids = bench.database_ids
db = build_database(((bench.poses[i], bench.features[i]) for i in ids), lambda x: Descriptor.normalized(
    model.embed_features(x)[0]))
descs = {i: Descriptor.normalized(model.embed_features(bench.features[i])[0]) for i in bench.split.query_ids}

# %%
# Three methods: embedding search over everything, search within 20 m of the
# GPS fix, and the GPS fix alone.
for mode in ("exhaustive", "gps", "gps_only"):
    report = run_benchmark(db, bench.split, RetrievalMethod(mode), bench.poses, descs, bench.gps)
    print("\n".join(report.summary_lines()))
    print()
