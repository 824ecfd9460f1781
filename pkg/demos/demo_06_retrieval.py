"""
Exact and GPS-restricted retrieval
==================================

The database maps descriptors to poses. A query returns the k nearest
descriptors, ties broken by reading id; with a GPS fix the search only
considers records within tau metres of it.
"""

# %%
import numpy as np

from pitloc.core import Descriptor, GpsFix, Pose
from pitloc.index import NoCandidatesError, build_database, query_gps, query_knn

rng = np.random.default_rng(0)
poses = [Pose(float(x), float(y), reading_id=i) for i, (x, y) in enumerate(rng.uniform(0, 500, size=(5000, 2)))]
vectors = rng.normal(size=(5000, 64))
db = build_database(zip(poses, vectors), Descriptor.normalized)
print(len(db), "records")

# %%
# Exhaustive search recovers a stored reading from its own descriptor.
q = Descriptor.normalized(vectors[42])
for h in query_knn(db, q, 3):
    print(h.reading_id, round(h.embedding_distance, 4))

# %%
# Restricting to 20 m around a fix near reading 42.
fix = GpsFix(poses[42].x + 3.0, poses[42].y - 2.0)
hits = query_gps(db, q, fix, tau=20.0, k=3)
print([h.reading_id for h in hits])

# %%
# A fix far from every record yields no candidates.
try:
    query_gps(db, q, GpsFix(-1000.0, -1000.0), tau=20.0, strict=True)
except NoCandidatesError as exc:
    print("strict query:", exc)
