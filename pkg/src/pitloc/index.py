"""Retrieval database of (descriptor, pose) records with exact search."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .checksum import fnv1a64
from .core import Descriptor, GpsFix, Pose

DEFAULT_CELL_SIZE = 25.0
DEFAULT_TAU = 20.0

_PITD_MAGIC = b"PITD"
_PITD_VERSION = 1


class NoCandidatesError(LookupError):
    """Raised by strict GPS queries when nothing lies within tau."""


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LocRecord:
    descriptor: Descriptor
    pose: Pose
    metadata_ref: str | None = None

    @property
    def reading_id(self) -> int:
        return self.pose.reading_id


@dataclass(frozen=True)
class RetrievalHit:
    record: LocRecord
    embedding_distance: float

    @property
    def predicted_pose(self) -> Pose:
        return self.record.pose

    @property
    def reading_id(self) -> int:
        return self.record.pose.reading_id


class HitList(list):
    """Ranked hits. ``no_candidates`` is set when a GPS restriction left nothing to rank."""

    no_candidates = False


def _cell_of(x, y, size):
    return (math.floor(x / size), math.floor(y / size))


class Database:
    """Immutable collection of :class:`LocRecord`, sorted by reading id.

    Descriptors are held as float32 (the on-disk precision) so that a saved
    and reloaded database answers every query identically.
    """

    def __init__(self, records: Iterable[LocRecord], descriptor_dim: int | None = None,
                 cell_size: float = DEFAULT_CELL_SIZE, failures: dict[int, str] | None = None):
        recs = sorted(records, key=lambda r: r.pose.reading_id)
        ids = np.array([r.pose.reading_id for r in recs], dtype=np.int64)
        if ids.size and np.any(np.diff(ids) == 0):
            dup = int(ids[:-1][np.diff(ids) == 0][0])
            raise ValueError(f"duplicate identifier: reading {dup}")
        dims = {r.descriptor.dim for r in recs}
        if len(dims) > 1:
            raise ValueError(f"mixed descriptor dimensions {sorted(dims)}")
        if dims:
            (dim,) = dims
            if descriptor_dim is not None and descriptor_dim != dim:
                raise ValueError(f"descriptor dimension {dim} does not match declared {descriptor_dim}")
        else:
            dim = int(descriptor_dim or 0)
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")

        mat32 = np.zeros((len(recs), dim), dtype=np.float32)
        for i, r in enumerate(recs):
            mat32[i] = r.descriptor.values
        self._mat = mat32.astype(np.float64)
        self.valid = np.array([r.descriptor.valid for r in recs], dtype=bool)
        # records carry the float32-rounded descriptor actually searched
        self.records = [
            LocRecord(Descriptor(self._mat[i], r.descriptor.valid), r.pose, r.metadata_ref)
            for i, r in enumerate(recs)
        ]
        self.ids = ids
        self.descriptor_dim = dim
        self.cell_size = float(cell_size)
        self.failures = dict(failures or {})
        self.positions = np.array([[r.pose.x, r.pose.y] for r in recs], dtype=np.float64).reshape(-1, 2)
        self._sqnorm = np.einsum("ij,ij->i", self._mat, self._mat)
        self._valid_idx = np.flatnonzero(self.valid)
        grid: dict[tuple[int, int], list[int]] = {}
        for i in self._valid_idx:
            grid.setdefault(_cell_of(*self.positions[i], self.cell_size), []).append(int(i))
        self.grid = {k: np.array(v, dtype=np.int64) for k, v in grid.items()}
        for arr in (self._mat, self.valid, self.ids, self.positions, self._sqnorm):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def searchable(self) -> int:
        return int(self._valid_idx.size)

    def audit_grid(self) -> bool:
        """True when grid membership is exactly the set of valid records, each in its own cell."""
        seen: list[int] = []
        for key, members in self.grid.items():
            for i in members:
                if _cell_of(*self.positions[i], self.cell_size) != key:
                    return False
            seen.extend(int(i) for i in members)
        return sorted(seen) == sorted(int(i) for i in self._valid_idx) and len(seen) == len(set(seen))

    def _check_query(self, q) -> np.ndarray:
        v = q.values if isinstance(q, Descriptor) else np.asarray(q, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.descriptor_dim:
            raise ValueError(f"query dimension {v.shape[0]} does not match database dimension {self.descriptor_dim}")
        return v

    def exact_distances(self, idx: np.ndarray, q: np.ndarray) -> np.ndarray:
        diff = self._mat[idx] - q
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def _rank(self, idx: np.ndarray, q: np.ndarray, k: int) -> HitList:
        d = self.exact_distances(idx, q)
        order = np.lexsort((self.ids[idx], d))[:k]
        return HitList(RetrievalHit(self.records[idx[j]], float(d[j])) for j in order)

    def _candidates(self, q: np.ndarray, k: int) -> np.ndarray:
        idx = self._valid_idx
        if k >= idx.size:
            return idx
        # Gram-form distances are only a prefilter; everything within the
        # rounding bound of the k-th value is re-ranked exactly.
        approx = self._sqnorm[idx] + q @ q - 2.0 * (self._mat[idx] @ q)
        kth = np.partition(approx, k - 1)[k - 1]
        slack = 8.0 * (self.descriptor_dim + 2) * np.finfo(np.float64).eps * (self._sqnorm[idx].max() + q @ q + 1.0)
        return idx[approx <= kth + 2.0 * slack]

    def query_knn(self, q, k: int = 1) -> HitList:
        """Exact top-``k`` records by Euclidean descriptor distance, ties by reading id."""
        v = self._check_query(q)
        if k < 1 or self._valid_idx.size == 0:
            return HitList()
        return self._rank(self._candidates(v, k), v, k)

    def records_within(self, gps: GpsFix, tau: float) -> np.ndarray:
        """Indices of valid records within ``tau`` metres of ``gps``, via the spatial grid."""
        cs = self.cell_size
        x0, y0 = math.floor((gps.x - tau) / cs), math.floor((gps.y - tau) / cs)
        x1, y1 = math.floor((gps.x + tau) / cs), math.floor((gps.y + tau) / cs)
        found = []
        if (x1 - x0 + 1) * (y1 - y0 + 1) > len(self.grid):
            keys = [key for key in self.grid if x0 <= key[0] <= x1 and y0 <= key[1] <= y1]
        else:
            keys = [(cx, cy) for cx in range(x0, x1 + 1) for cy in range(y0, y1 + 1) if (cx, cy) in self.grid]
        for key in keys:
            found.append(self.grid[key])
        if not found:
            return np.zeros(0, dtype=np.int64)
        idx = np.sort(np.concatenate(found))
        p = self.positions[idx]
        near = np.hypot(p[:, 0] - gps.x, p[:, 1] - gps.y) <= tau
        return idx[near]

    def query_gps(self, q, gps: GpsFix, tau: float = DEFAULT_TAU, k: int = 1, strict: bool = False) -> HitList:
        """Exact top-``k`` among records within ``tau`` metres of the GPS fix.

        An empty candidate set gives an empty list with ``no_candidates`` set,
        or raises :class:`NoCandidatesError` when ``strict``.
        """
        if not tau > 0:
            raise ValueError("tau must be positive")
        v = self._check_query(q)
        idx = self.records_within(gps, tau)
        if idx.size == 0:
            if strict:
                raise NoCandidatesError("no candidates within tau")
            out = HitList()
            out.no_candidates = True
            return out
        if k < 1:
            return HitList()
        return self._rank(idx, v, k)

    def to_bytes(self) -> bytes:
        dt = _record_dtype(self.descriptor_dim)
        arr = np.zeros(len(self), dtype=dt)
        if len(self):
            arr["desc"] = self._mat.astype(np.float32)
            arr["x"] = self.positions[:, 0]
            arr["y"] = self.positions[:, 1]
            arr["heading"] = [r.pose.heading for r in self.records]
            arr["trip"] = [r.pose.trip_id for r in self.records]
            arr["rid"] = self.ids.astype(np.uint64)
        head = _PITD_MAGIC + struct.pack("<IIQ", _PITD_VERSION, self.descriptor_dim, len(self))
        payload = head + arr.tobytes()
        return payload + struct.pack("<Q", fnv1a64(payload))


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("desc", "<f4", (dim,)), ("x", "<f8"), ("y", "<f8"), ("heading", "<f8"),
                     ("trip", "<u8"), ("rid", "<u8")])


def build_database(readings: Iterable, embedder: Callable[[object], Descriptor],
                   cell_size: float = DEFAULT_CELL_SIZE, descriptor_dim: int | None = None) -> Database:
    """Embed ``(pose, payload)`` pairs into a database.

    A payload whose embedding raises is recorded in ``Database.failures`` and
    skipped; the build carries on.
    """
    records, failures = [], {}
    seen = set()
    for pose, payload in readings:
        if pose.reading_id in seen:
            raise ValueError(f"duplicate identifier: reading {pose.reading_id}")
        seen.add(pose.reading_id)
        try:
            desc = embedder(payload)
        except Exception as exc:  # noqa: BLE001 - per-reading failures are data
            failures[pose.reading_id] = f"{type(exc).__name__}: {exc}"
            continue
        records.append(LocRecord(desc, pose))
    return Database(records, descriptor_dim=descriptor_dim, cell_size=cell_size, failures=failures)


def query_knn(db: Database, q, k: int = 1) -> HitList:
    return db.query_knn(q, k)


def query_gps(db: Database, q, gps: GpsFix, tau: float = DEFAULT_TAU, k: int = 1, strict: bool = False) -> HitList:
    return db.query_gps(q, gps, tau, k, strict)


def database_from_bytes(data: bytes, cell_size: float = DEFAULT_CELL_SIZE) -> Database:
    if len(data) < 28 or data[:4] != _PITD_MAGIC:
        raise ValueError("not a database file (bad magic)")
    version, dim, count = struct.unpack_from("<IIQ", data, 4)
    if version != _PITD_VERSION:
        raise ValueError(f"unsupported database version {version} (expected {_PITD_VERSION})")
    dt = _record_dtype(dim)
    expected = 20 + count * dt.itemsize + 8
    if len(data) != expected:
        raise ChecksumError(f"database file length {len(data)} does not match header ({expected})")
    (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
    if fnv1a64(data[:-8]) != stored:
        raise ChecksumError("database checksum mismatch")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=20)
    records = []
    for row in arr:
        vec = row["desc"].astype(np.float64)
        pose = Pose(float(row["x"]), float(row["y"]), float(row["heading"]), int(row["trip"]), 0.0, int(row["rid"]))
        records.append(LocRecord(Descriptor(vec, valid=bool(np.any(vec != 0))), pose))
    return Database(records, descriptor_dim=dim, cell_size=cell_size)


def save_database(db: Database, path) -> None:
    with open(path, "wb") as fh:
        fh.write(db.to_bytes())


def load_database(path, cell_size: float = DEFAULT_CELL_SIZE) -> Database:
    with open(path, "rb") as fh:
        return database_from_bytes(fh.read(), cell_size)
