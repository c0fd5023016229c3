"""Local geometric transformer: tangent-plane and distance weighted neighbor aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .geometry import PointCloud, knn
from .kernel import DiffArray
from .nn import Linear, Module

COMBINE_OPS = ("hadamard", "sum", "average", "concat")
WEIGHT_MODES = ("both", "distance", "geometric")
NORMALIZATIONS = ("sum", "softmax")


def tangent_plane_distance(p, q, n, check: bool = True):
    """Signed offset of ``p`` from the plane through ``q`` with unit normal ``n``.

    Broadcasts over leading axes.
    """
    p, q, n = (np.asarray(a, dtype=np.float64) for a in (p, q, n))
    if check and np.any(np.abs(np.linalg.norm(n, axis=-1) - 1) > 1e-6):
        raise K.ContractError("tangent_plane_distance: normal is not unit length")
    return np.einsum("...d,...d->...", p - q, n)


def geometric_weight(d_tan):
    return np.exp(-np.abs(d_tan))


def distance_weight(d, eps: float = K.DEFAULT_EPS):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distance_weight expects nonnegative distances")
    return 1.0 / (d + eps)


@dataclass
class LocalGeometry:
    """Euclidean neighborhoods of a batch of clouds at one resolution.

    ``idx``/``dist``/``dtan`` have shape ``(B, N, k)``; ``dtan[b, i, j]`` is
    the tangent-plane distance from point ``i`` to the plane of its ``j``-th
    neighbor.
    """

    idx: np.ndarray
    dist: np.ndarray
    dtan: np.ndarray

    @property
    def k(self):
        return self.idx.shape[-1]


def build_local_geometry(positions, normals, k: int) -> LocalGeometry:
    """Neighborhoods for a ``(B, N, 3)`` batch; ``k`` must not exceed ``N``."""
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if positions.ndim == 2:
        positions, normals = positions[None], normals[None]
    idx, dist, dtan = [], [], []
    for p, n in zip(positions, normals):
        nb = knn(p, p, k)
        idx.append(nb.indices)
        dist.append(nb.distances)
        dtan.append(tangent_plane_distance(p[:, None, :], p[nb.indices], n[nb.indices], check=False))
    return LocalGeometry(np.stack(idx), np.stack(dist), np.stack(dtan))


@dataclass
class LocalWeights:
    distance_w: np.ndarray
    geometric_w: np.ndarray
    combined_w: DiffArray
    fallback_rows: np.ndarray


def combine_weights(distance_w, geometric_w, op: str = "hadamard", concat_reducer: Linear | None = None,
                    normalization: str = "sum"):
    """Fuse distance and geometric weights, then normalize each row.

    Returns ``(weights, fallback)`` where ``fallback`` flags rows that summed
    to zero and were replaced by ``1/k``.
    """
    dis, geo = K.as_array(distance_w), K.as_array(geometric_w)
    if dis.shape != geo.shape:
        raise K.DimensionError(f"combine_weights: {dis.shape} vs {geo.shape}")
    if op == "hadamard":
        raw = K.mul(dis, geo)
    elif op == "sum":
        raw = K.add(dis, geo)
    elif op == "average":
        raw = K.mul(K.add(dis, geo), 0.5)
    elif op == "concat":
        if concat_reducer is None:
            raise ValueError("concat combination needs a 2->1 reducer")
        pair = K.stack([dis, geo], axis=-1)
        raw = K.reshape(K.relu(concat_reducer(pair)), dis.shape)
    else:
        raise ValueError(f"unknown combine op {op!r}; expected one of {COMBINE_OPS}")
    if normalization == "softmax":
        return K.softmax_rows(raw), np.zeros(raw.shape[:-1], dtype=bool)
    return K.normalize_rows(raw)


class LocalGeometricBlock(Module):
    """Aggregates projected neighbor features with fused geometric/distance weights.

    ``weight_mode`` selects the ablations: ``distance`` replaces the
    geometric weights by ones, ``geometric`` does the same for the
    distance weights. ``single_space=False`` draws neighbor features from
    a feature-space KNN recomputed on every call, paired rank-by-rank with
    the Euclidean weights.
    """

    def __init__(self, channels: int, rng: np.random.Generator, combine_op: str = "hadamard",
                 weight_mode: str = "both", single_space: bool = True, normalization: str = "sum",
                 eps: float = K.DEFAULT_EPS, dtype=None):
        if combine_op not in COMBINE_OPS:
            raise ValueError(f"unknown combine op {combine_op!r}")
        if weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {weight_mode!r}")
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {normalization!r}")
        self.channels = channels
        self.value_projection = Linear(channels, channels, rng, dtype)
        self.output_projection = Linear(channels, channels, rng, dtype)
        self.concat_reducer = Linear(2, 1, rng, dtype) if combine_op == "concat" else None
        self.combine_op = combine_op
        self.weight_mode = weight_mode
        self.single_space = single_space
        self.normalization = normalization
        self.eps = eps

    def weights(self, geom: LocalGeometry) -> LocalWeights:
        dtype = self.value_projection.weight.dtype
        dist = DiffArray(geom.dist.astype(dtype))
        dtan = DiffArray(geom.dtan.astype(dtype))
        dis = K.reciprocal_eps(dist, self.eps)
        geo = K.exp(K.neg(K.abs(dtan)))
        ones = DiffArray(np.ones(geom.dist.shape, dtype=dtype))
        if self.weight_mode == "distance":
            geo = ones
        elif self.weight_mode == "geometric":
            dis = ones
        combined, fallback = combine_weights(dis, geo, self.combine_op, self.concat_reducer, self.normalization)
        return LocalWeights(dis.values, geo.values, combined, fallback)

    def neighbor_index(self, features: DiffArray, geom: LocalGeometry) -> np.ndarray:
        if self.single_space:
            return geom.idx
        feats = features.values.reshape(-1, *features.shape[-2:])
        return np.stack([knn(f, f, geom.k).indices for f in feats]).reshape(geom.idx.shape)

    def __call__(self, features: DiffArray, geom: LocalGeometry) -> DiffArray:
        if features.shape[-1] != self.channels:
            raise K.DimensionError(f"local block expects {self.channels} channels, got {features.shape}")
        w = self.weights(geom).combined_w
        values = self.value_projection(features)
        gathered = K.take_rows(values, self.neighbor_index(features, geom))
        agg = K.reduce("sum", K.mul(gathered, K.reshape(w, (*w.shape, 1))), axis=-2)
        return K.add(features, self.output_projection(agg))


def local_geo_forward(cloud: PointCloud, block: LocalGeometricBlock, k: int) -> np.ndarray:
    """Run one block on a single cloud and return ``N x C`` output features."""
    if cloud.normals is None:
        raise K.ContractError("cloud has no normals; run estimate_normals first")
    if cloud.features is None:
        raise K.ContractError("cloud has no features")
    geom = build_local_geometry(cloud.positions, cloud.normals, min(k, len(cloud)))
    feats = DiffArray(cloud.features[None].astype(block.value_projection.weight.dtype))
    return block(feats, geom).values[0]
