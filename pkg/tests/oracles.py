"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def naive_knn(matrix, ids, valid, q, k):
    """Sort every valid record by (distance, reading id) and keep the first ``k``."""
    scored = []
    for row, rid, ok in zip(matrix, ids, valid):
        if ok:
            diff = row - q
            scored.append((math.sqrt(float(np.dot(diff, diff))), int(rid)))
    scored.sort()
    return scored[:k]


def naive_gps(matrix, ids, valid, xy, q, gps, tau, k):
    """Filter by planar distance to the fix, then :func:`naive_knn`."""
    keep = [math.hypot(x - gps[0], y - gps[1]) <= tau for x, y in xy]
    return naive_knn(matrix, ids, np.asarray(valid) & np.asarray(keep), q, k)


def two_pass_pearson(x, y):
    """Pearson r from explicit means, covariance and standard deviations."""
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sx = math.sqrt(sum((a - mx) ** 2 for a in x))
    sy = math.sqrt(sum((b - my) ** 2 for b in y))
    return cov / (sx * sy)


def percent_within(errors, t):
    return 100.0 * sum(1 for e in errors if e <= t) / len(errors)


def brute_knn(matrix, ids, valid, q, k, mask=None):
    """Vectorized brute force: row-wise Euclidean distances, then a (distance, id) sort."""
    keep = np.asarray(valid, dtype=bool) if mask is None else np.asarray(valid, dtype=bool) & mask
    rows = np.flatnonzero(keep)
    d = np.sqrt(((matrix[rows] - q) ** 2).sum(axis=1))
    order = np.lexsort((ids[rows], d))[:k]
    return [(float(d[i]), int(ids[rows][i])) for i in order]


def heading_gap(a, b):
    """Smallest absolute difference between two headings in degrees."""
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)
