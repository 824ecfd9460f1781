"""Descriptor extraction: pooled BEV statistics, k-means/VLAD, learned head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bev import BEVGrid
from .core import Descriptor

PYRAMID_LEVELS = (4, 8)

_PITM_MAGIC = b"PITM"
_PITM_VERSION = 1
_PITV_MAGIC = b"PITV"
_PITV_VERSION = 1
_NONLINEARITIES = {"relu": 1, "identity": 0}


def feature_dim(channels: int) -> int:
    return 2 * channels + sum(n * n for n in PYRAMID_LEVELS)


def _tile_sums(plane: np.ndarray, tiles: int) -> np.ndarray:
    l, w = plane.shape
    ti = (np.arange(l) * tiles) // l
    tj = (np.arange(w) * tiles) // w
    rows = np.zeros((tiles, w))
    np.add.at(rows, ti, plane)
    out = np.zeros((tiles, tiles))
    np.add.at(out.T, tj, rows.T)
    return out.reshape(-1)


def bev_feature_vector(grid: BEVGrid) -> np.ndarray:
    """Fixed-length summary of a BEV grid.

    Layout: per-channel occupancy sums (c), per-channel mean point intensity
    (c), then occupancy pooled over 4x4 and 8x8 spatial tiles (row-major,
    x tile index major). Length ``2c + 80``.
    """
    occ = grid.occupancy.astype(np.float64)
    per_channel = occ.sum(axis=(0, 1))
    inten_sum = (occ * grid.mean_intensity).sum(axis=(0, 1))
    mean_inten = np.divide(inten_sum, per_channel, out=np.zeros_like(inten_sum), where=per_channel > 0)
    plane = occ.sum(axis=2)
    parts = [per_channel, mean_inten] + [_tile_sums(plane, n) for n in PYRAMID_LEVELS]
    return np.concatenate(parts)


def bev_local_features(grid: BEVGrid, patch: int = 8) -> np.ndarray:
    """Non-empty ``patch x patch`` cell patches of channel-summed occupancy.

    Returns an ``(n, patch*patch)`` array; partial patches at the far edges
    are dropped.
    """
    plane = grid.occupancy.sum(axis=2).astype(np.float64)
    l, w = plane.shape
    nl, nw = l // patch, w // patch
    blocks = plane[: nl * patch, : nw * patch].reshape(nl, patch, nw, patch).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(nl * nw, patch * patch)
    return blocks[blocks.sum(axis=1) > 0]


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centers: np.ndarray
    seed: int = 0
    distortion_history: tuple[float, ...] = field(default=())

    def __post_init__(self):
        c = np.array(self.centers, dtype=np.float64, copy=True)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("vocabulary needs a (k, d) center array with k >= 1")
        if not np.all(np.isfinite(c)):
            raise ValueError("vocabulary centers must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "centers", c)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # direct differences keep exact zeros for coincident points
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _assign(X, C):
    d2 = _sq_dists(X, C)
    labels = d2.argmin(axis=1)
    return labels, float(d2[np.arange(X.shape[0]), labels].sum())


def kmeans_fit(features, k: int = 128, seed: int = 0, max_iters: int = 100) -> Vocabulary:
    """Lloyd's k-means from a k-means++ seeding.

    Stops after ``max_iters`` rounds or as soon as no assignment changes. A
    cluster that empties keeps its previous center, so the distortion recorded
    in ``distortion_history`` never increases.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be a 2-D array")
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"insufficient features: {n} < k={k}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    closest = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            raise ValueError("insufficient features: fewer distinct features than k")
        idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, ((X - X[idx]) ** 2).sum(axis=1))
    centers = X[chosen].copy()

    labels, distortion = _assign(X, centers)
    history = [distortion]
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        new_labels, distortion = _assign(X, centers)
        history.append(distortion)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return Vocabulary(centers, seed=seed, distortion_history=tuple(history))


def vlad_pool(features, vocab: Vocabulary) -> Descriptor:
    """VLAD aggregation with per-cluster intra-normalization.

    Residual blocks that sum to zero stay zero. When every block is zero (or
    there are no features) the result is the zero vector flagged invalid.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.size == 0:
        return Descriptor(np.zeros(vocab.k * vocab.d), valid=False)
    X = X.reshape(-1, X.shape[-1])
    if X.shape[1] != vocab.d:
        raise ValueError(f"feature dimension {X.shape[1]} does not match vocabulary dimension {vocab.d}")
    C = vocab.centers
    labels = _sq_dists(X, C).argmin(axis=1)
    blocks = np.zeros_like(C)
    np.add.at(blocks, labels, X - C[labels])
    norms = np.linalg.norm(blocks, axis=1)
    nz = norms > 0
    blocks[nz] /= norms[nz, None]
    return Descriptor.normalized(blocks.reshape(-1))


class EmbeddingModel:
    """Stack of affine layers with a rectifier between consecutive layers.

    ``weights[i]`` has shape ``(out, in)``. The raw output is l2-normalized by
    :func:`embed`; :meth:`forward` and :meth:`backward` work on batches of
    feature rows and are what training uses.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], nonlinearity: str = "relu"):
        if nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        self.weights = [np.array(W, dtype=np.float64) for W in weights]
        self.biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        self.nonlinearity = nonlinearity
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input size {W.shape[1]} does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.nonlinearity)

    @classmethod
    def identity(cls, dim: int) -> "EmbeddingModel":
        return cls([np.eye(dim)], [np.zeros(dim)], "relu")

    @classmethod
    def random(cls, input_dim: int, hidden: int = 256, output: int = 256, seed: int = 0,
               feature_mean=None, feature_scale=None) -> "EmbeddingModel":
        """He-initialized two-layer model.

        When ``feature_mean``/``feature_scale`` are given, input standardization
        ``(x - mean) / scale`` is folded into the first affine layer.
        """
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((hidden, input_dim)) * np.sqrt(2.0 / input_dim)
        b1 = np.zeros(hidden)
        W2 = rng.standard_normal((output, hidden)) * np.sqrt(2.0 / hidden)
        b2 = np.zeros(output)
        if feature_scale is not None:
            scale = np.asarray(feature_scale, dtype=np.float64)
            scale = np.where(scale > 0, scale, 1.0)
            W1 = W1 / scale[None, :]
        if feature_mean is not None:
            b1 = b1 - W1 @ np.asarray(feature_mean, dtype=np.float64)
        return cls([W1, W2], [b1, b2], "relu")

    def forward(self, X: np.ndarray, keep: bool = False):
        """Raw (pre-normalization) outputs for rows of ``X``."""
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if h.shape[1] != self.input_dim:
            raise ValueError(f"input dimension {h.shape[1]} does not match model input {self.input_dim}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last and self.nonlinearity == "relu":
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients, ordered like :meth:`parameters`."""
        n = len(self.weights)
        gW: list[np.ndarray] = [None] * n
        gb: list[np.ndarray] = [None] * n
        g = grad_out
        for i in range(n - 1, -1, -1):
            gW[i] = g.T @ acts[i]
            gb[i] = g.sum(axis=0)
            if i:
                g = g @ self.weights[i]
                if self.nonlinearity == "relu":
                    g = g * (acts[i] > 0)
        return [t for pair in zip(gW, gb) for t in pair]

    def embed_features(self, X: np.ndarray) -> np.ndarray:
        """Unit-norm embeddings for feature rows; zero rows stay zero."""
        out = self.forward(X)
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.divide(out, norms, out=np.zeros_like(out), where=norms > 0)


def embed(grid: BEVGrid, model: EmbeddingModel) -> Descriptor:
    x = bev_feature_vector(grid)
    if x.shape[0] != model.input_dim:
        raise ValueError(f"feature length {x.shape[0]} does not match model input {model.input_dim}")
    return Descriptor.normalized(model.forward(x)[0])


def model_to_bytes(model: EmbeddingModel) -> bytes:
    sizes = model.sizes
    head = _PITM_MAGIC + struct.pack("<III", _PITM_VERSION, _NONLINEARITIES[model.nonlinearity], len(sizes))
    head += struct.pack(f"<{len(sizes)}I", *sizes)
    body = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.parameters())
    return head + body


def model_from_bytes(data: bytes) -> EmbeddingModel:
    if data[:4] != _PITM_MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, nl_code, n = struct.unpack_from("<III", data, 4)
    if version != _PITM_VERSION:
        raise ValueError(f"unsupported model version {version}")
    names = {v: k for k, v in _NONLINEARITIES.items()}
    if nl_code not in names:
        raise ValueError(f"unknown nonlinearity code {nl_code}")
    sizes = struct.unpack_from(f"<{n}I", data, 16)
    off = 16 + 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(data, dtype="<f4", count=fan_in * fan_out, offset=off).reshape(fan_out, fan_in)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        weights.append(W.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise ValueError("model file length does not match its header")
    return EmbeddingModel(weights, biases, names[nl_code])


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PITV_MAGIC)
        fh.write(struct.pack("<IIIq", _PITV_VERSION, vocab.k, vocab.d, vocab.seed))
        fh.write(np.ascontiguousarray(vocab.centers, dtype="<f4").tobytes())


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _PITV_MAGIC:
        raise ValueError(f"{path}: not a vocabulary file (bad magic)")
    version, k, d, seed = struct.unpack_from("<IIIq", data, 4)
    if version != _PITV_VERSION:
        raise ValueError(f"{path}: unsupported vocabulary version {version}")
    if len(data) != 24 + 4 * k * d:
        raise ValueError(f"{path}: vocabulary file length does not match its header")
    centers = np.frombuffer(data, dtype="<f4", offset=24).reshape(k, d).astype(np.float64)
    return Vocabulary(centers, seed=seed)
