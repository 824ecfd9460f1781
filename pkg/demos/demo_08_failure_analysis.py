"""
Why localization fails
======================

Per-query errors are joined with condition tags, queries with a bad GPS fix
are dropped, and failure flags (error above 2 m) are correlated with the tags
and summarized by tag bins.
"""

# %%
import numpy as np
import pandas as pd

from pitloc.analysis import binned_summary, build_table, gps_filter, oracle_fusion_error, pearson_matrix
from pitloc.synth import ConditionTags

rng = np.random.default_rng(4)
n = 400
occ = rng.uniform(0, 25, n)
tags = {i: ConditionTags(lidar_occlusion=float(o), sun_angle=float(rng.uniform(-10, 60))) for i, o in enumerate(occ)}
gps_err = rng.rayleigh(2.9, n)
# a method that degrades with occlusion and one that does not
err_a = rng.exponential(0.5 + 0.1 * occ)
err_b = rng.exponential(1.2, n)
reports = {name: pd.DataFrame({"query_id": range(n), "error_m": e, "gps_error_m": gps_err,
                               "rank_of_nearest_true": 1}) for name, e in (("a", err_a), ("b", err_b))}

# %%
table, missing = build_table(reports, tags)
table, dropped = gps_filter(table, 20.0)
print(len(table), "rows;", dropped, "dropped by the GPS filter")

# %%
r = pearson_matrix(table, ["failure_a", "failure_b", "lidar_occlusion_pct", "sun_angle_deg"])
print(r.round(3))

# %%
# Failure rate by occlusion bin, and what picking the better method per query would give.
print(binned_summary(table, "lidar_occlusion_pct", [0, 5, 10, 15, 20, 25], "error_a", "failure-rate"))
fused = oracle_fusion_error(table, ["error_a", "error_b"])
print("median error a / b / oracle fusion:",
      *(round(float(np.median(v)), 3) for v in (table["error_a"], table["error_b"], fused)))
