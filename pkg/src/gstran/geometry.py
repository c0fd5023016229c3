"""Non-differentiable point-cloud geometry.

Sampling, exact neighbor search, PCA normals, inverse-distance
interpolation and room-to-block splitting. All functions are pure numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INTERP_EPS = 1e-8
COINCIDENT = 1e-9


@dataclass
class PointCloud:
    positions: np.ndarray
    normals: np.ndarray | None = None
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.ndim == 1:
                self.features = self.features[:, None]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        for name in ("normals", "features", "labels"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} rows, positions have {n}")

    def __len__(self):
        return len(self.positions)

    def validate(self, class_count: int | None = None, tol: float = 1e-6) -> None:
        if self.normals is not None:
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1) > tol):
                raise ValueError("normals must have unit length")
        if self.labels is not None and class_count is not None:
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= class_count):
                raise ValueError(f"labels must lie in [0, {class_count})")

    def subset(self, idx) -> "PointCloud":
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(self.positions[idx], take(self.normals), take(self.features),
                          take(self.labels), self.category)


@dataclass
class NeighborIndex:
    """Per-query neighbor indices and distances, ascending per row."""

    indices: np.ndarray
    distances: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def _sq_dists(queries, source):
    diff = queries[:, None, :] - source[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def knn(source_points, queries, k: int, metric: str = "euclidean", chunk: int = 256) -> NeighborIndex:
    """Exact k nearest neighbors of each query among ``source_points``.

    Ties resolve to the lower source index. A query that is itself a source
    point finds itself at distance zero.
    """
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    src = np.asarray(source_points, dtype=np.float64)
    qry = np.asarray(queries, dtype=np.float64)
    if src.ndim != 2 or qry.ndim != 2 or src.shape[1] != qry.shape[1] or src.shape[1] < 1:
        raise ValueError(f"knn: incompatible shapes {src.shape} and {qry.shape}")
    n = len(src)
    if k < 1 or k > n:
        raise ValueError(f"knn: k={k} must lie in [1, {n}]")
    idx = np.empty((len(qry), k), dtype=np.int64)
    dist = np.empty((len(qry), k))
    step = max(1, chunk * 4096 // max(n, 1))
    for s in range(0, len(qry), step):
        d2 = _sq_dists(qry[s:s + step], src)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[s:s + step] = order
        dist[s:s + step] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(idx, dist)


def fps(positions, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling of ``m`` indices beginning at ``start``.

    Each step picks the point with the largest distance to the selected set;
    ties go to the lowest index.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"fps: m={m} must lie in [1, {n}]")
    if not 0 <= start < n:
        raise ValueError(f"fps: start={start} out of range for {n} points")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.full(n, np.inf)
    cur = start
    for i in range(1, m):
        d = pts - pts[cur]
        np.minimum(mind, np.einsum("nd,nd->n", d, d), out=mind)
        mind[chosen[:i]] = -1.0
        cur = int(np.argmax(mind))
        chosen[i] = cur
    return chosen


@dataclass
class NormalEstimate:
    normals: np.ndarray
    degenerate: list = field(default_factory=list)


def estimate_normals(positions, k: int, rank_tol: float = 1e-10) -> NormalEstimate:
    """PCA normals: smallest-eigenvalue eigenvector of each k-neighborhood covariance.

    Normals are oriented away from the cloud centroid. Points whose
    neighborhood covariance has rank below 2 get ``+z`` and are listed in
    ``degenerate``.
    """
    if k < 3:
        raise ValueError("estimate_normals needs k >= 3")
    pts = np.asarray(positions, dtype=np.float64)
    if len(pts) < k:
        raise ValueError(f"estimate_normals: {len(pts)} points < k={k}")
    nbr = knn(pts, pts, k).indices
    local = pts[nbr]
    centered = local - local.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()
    scale = np.maximum(evals[:, 2], 0)
    degenerate = (evals[:, 1] <= rank_tol * scale) | (scale <= 1e-300)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = pts - pts.mean(axis=0)
    dots = np.einsum("nd,nd->n", normals, outward)
    tie = np.abs(dots) <= 1e-12 * np.maximum(np.linalg.norm(outward, axis=1), 1e-300)
    normals[(dots < 0) & ~tie] *= -1
    normals[degenerate] = (0.0, 0.0, 1.0)
    return NormalEstimate(normals, np.flatnonzero(degenerate).tolist())


def interpolation_weights(known_positions, queries, n: int = 3, eps: float = INTERP_EPS):
    """Indices and normalized inverse-squared-distance weights for upsampling.

    Returns ``(idx, w)`` of shape ``(M, n')`` where ``n' = min(n, len(known))``.
    Queries within ``1e-9`` of a known point get a one-hot weight on it.
    """
    known = np.asarray(known_positions, dtype=np.float64)
    if len(known) == 0:
        raise ValueError("interpolation needs a non-empty known cloud")
    nb = knn(known, queries, min(n, len(known)))
    w = 1.0 / (nb.distances ** 2 + eps)
    hit = nb.distances[:, 0] < COINCIDENT
    w[hit] = 0.0
    w[hit, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return nb.indices, w


def interpolate_features(known: PointCloud, queries) -> np.ndarray:
    if known.features is None or len(known) == 0:
        raise ValueError("interpolate_features needs a non-empty cloud with features")
    idx, w = interpolation_weights(known.positions, queries)
    return np.einsum("mk,mkc->mc", w, known.features[idx])


def block_split(room: PointCloud, block_size: float = 2.0, points_per_block: int = 4096,
                seed: int = 0) -> list[PointCloud]:
    """Partition a room into ``block_size`` xy cells with a fixed point budget each.

    Cells are anchored at the room's xy minimum and visited in row-major
    order. Cells holding fewer points than the budget are sampled with
    replacement.
    """
    if len(room) == 0:
        raise ValueError("block_split: empty room")
    rng = np.random.default_rng(seed)
    xy = room.positions[:, :2]
    cell = np.floor((xy - xy.min(axis=0)) / block_size).astype(np.int64)
    blocks = []
    for cx, cy in sorted(set(map(tuple, cell))):
        members = np.flatnonzero((cell[:, 0] == cx) & (cell[:, 1] == cy))
        replace = len(members) < points_per_block
        pick = rng.choice(members, points_per_block, replace=replace)
        blocks.append(room.subset(pick))
    return blocks


def downsampled_count(n: int, ratio: int) -> int:
    return math.ceil(n / ratio)
