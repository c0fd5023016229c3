"""Hierarchical encoder-decoder assembling the local and global blocks.

The encoder runs a local + global block pair per stage, then keeps a
farthest-point subset of ``1/downsample_ratio`` of the points and widens
their features by ``channel_multiplier``. The decoder walks back up,
interpolating coarse features onto the finer points, fusing them with the
skip features and running another block pair at each resolution.

Geometry (neighborhoods, sampling indices, interpolation weights) only
depends on positions and normals, so it is computed once per cloud into a
:class:`StageGeometry` pyramid and can be cached across epochs.
"""
from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .geometry import PointCloud, estimate_normals, fps, interpolation_weights
from .global_block import GLOBAL_MODES, GlobalSemanticBlock
from .kernel import DiffArray
from .local_block import COMBINE_OPS, WEIGHT_MODES, LocalGeometricBlock, LocalGeometry, build_local_geometry
from .nn import MLP, Linear, Module

SEMANTIC_CLASSES = 13
PART_CLASSES = 50
PART_CATEGORIES = 16


@dataclass
class ModelConfig:
    stage_count: int = 5
    base_channels: int = 32
    channel_multiplier: int = 2
    downsample_ratio: int = 4
    k_neighbors: int = 24
    head_count: int = 4
    combine_op: str = "hadamard"
    class_count: int = SEMANTIC_CLASSES
    input_has_normals: bool = True
    local_weights: str = "both"
    global_mode: str = "full"
    single_space: bool = True
    renormalize_refined: bool = True
    local_normalization: str = "sum"
    dropout: float = 0.0
    category_count: int = 0
    normal_k: int = 16
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.stage_count < 1:
            raise ValueError("stage_count must be >= 1")
        if self.combine_op not in COMBINE_OPS:
            raise ValueError(f"combine_op must be one of {COMBINE_OPS}")
        if self.local_weights not in WEIGHT_MODES:
            raise ValueError(f"local_weights must be one of {WEIGHT_MODES}")
        if self.global_mode not in GLOBAL_MODES + ("none",):
            raise ValueError(f"global_mode must be one of {GLOBAL_MODES + ('none',)}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        for c in self.channels:
            if c % self.head_count:
                raise ValueError(f"head_count {self.head_count} does not divide stage width {c}")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * self.channel_multiplier ** s for s in range(self.stage_count)]

    @property
    def top_width(self) -> int:
        return self.channels[-1]

    @property
    def total_rate(self) -> int:
        return self.downsample_ratio ** (self.stage_count - 1)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def stage_points(self, n: int) -> list[int]:
        counts = [n]
        for _ in range(self.stage_count - 1):
            counts.append(math.ceil(counts[-1] / self.downsample_ratio))
        return counts

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        return cls(**{k: _coerce(v, names[k]) for k, v in d.items() if k in names})


def _coerce(value, type_name):
    if not isinstance(value, str):
        return value
    if type_name in ("int", int):
        return int(value)
    if type_name in ("float", float):
        return float(value)
    if type_name in ("bool", bool):
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return value.lower() in ("true", "1", "yes")
    return value


@dataclass
class StageGeometry:
    """Geometry of one resolution for a batch of ``B`` clouds.

    ``down_idx`` selects the next stage's points among these; ``up_idx`` and
    ``up_w`` interpolate the next stage's features back onto these points.
    """

    positions: np.ndarray
    normals: np.ndarray
    local: LocalGeometry
    down_idx: np.ndarray | None = None
    up_idx: np.ndarray | None = None
    up_w: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.positions.shape[1]


def build_pyramid(positions, normals, config: ModelConfig, fps_start=0) -> list[StageGeometry]:
    """Per-stage geometry for a single cloud (``N x 3``) or a batch (``B x N x 3``)."""
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if positions.ndim == 2:
        return stack_pyramids([build_pyramid(positions[None], normals[None], config, fps_start)])
    if positions.shape[0] != 1:
        starts = np.broadcast_to(np.asarray(fps_start), positions.shape[:1])
        return stack_pyramids([build_pyramid(p[None], n[None], config, int(s))
                               for p, n, s in zip(positions, normals, starts)])
    pos, nrm = positions[0], normals[0]
    stages = []
    start = int(np.asarray(fps_start).reshape(-1)[0])
    for s in range(config.stage_count):
        k = config.k_neighbors
        if k > len(pos):
            warnings.warn(f"stage {s}: k={k} clamped to {len(pos)} points", stacklevel=2)
            k = len(pos)
        geom = StageGeometry(pos[None], nrm[None], build_local_geometry(pos, nrm, k))
        stages.append(geom)
        if s < config.stage_count - 1:
            m = math.ceil(len(pos) / config.downsample_ratio)
            sel = fps(pos, m, start)
            geom.down_idx = sel[None]
            pos, nrm = pos[sel], nrm[sel]
            start = 0
    for fine, coarse in zip(stages[:-1], stages[1:]):
        idx, w = interpolation_weights(coarse.positions[0], fine.positions[0])
        fine.up_idx, fine.up_w = idx[None], w[None]
    return stages


def stack_pyramids(pyramids: list[list[StageGeometry]]) -> list[StageGeometry]:
    """Concatenate single-cloud pyramids of equal shape along the batch axis."""
    if len(pyramids) == 1:
        return pyramids[0]
    out = []
    for stages in zip(*pyramids):
        cat = lambda name: None if getattr(stages[0], name) is None else np.concatenate(  # noqa: E731
            [getattr(g, name) for g in stages])
        local = LocalGeometry(*(np.concatenate([getattr(g.local, a) for g in stages]) for a in ("idx", "dist", "dtan")))
        out.append(StageGeometry(cat("positions"), cat("normals"), local, cat("down_idx"), cat("up_idx"), cat("up_w")))
    return out


@dataclass
class StageState:
    geometry: StageGeometry
    features: DiffArray
    skip_features: DiffArray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[-2], self.features.shape[-1]


def _blocks(config: ModelConfig, width: int, rng, dtype):
    local = LocalGeometricBlock(width, rng, config.combine_op, config.local_weights, config.single_space,
                                config.local_normalization, dtype=dtype)
    glob = None
    if config.global_mode != "none":
        glob = GlobalSemanticBlock(width, config.head_count, rng, config.global_mode,
                                   config.renormalize_refined, dtype=dtype)
    return local, glob


class EncoderStage(Module):
    def __init__(self, config: ModelConfig, s: int, rng, dtype):
        width = config.channels[s]
        self.local, self.glob = _blocks(config, width, rng, dtype)
        last = s == config.stage_count - 1
        self.down = None if last else MLP([width, config.channels[s + 1]], rng, dtype, final_act=True)

    def __call__(self, state: StageState, coarse_geometry: StageGeometry | None):
        """Run the block pair, then (except at the last stage) downsample and widen."""
        f = self.local(state.features, state.geometry.local)
        if self.glob is not None:
            f = self.glob(f)
        done = StageState(state.geometry, f, skip_features=f)
        if self.down is None:
            return done, None
        sampled = K.take_rows(f, state.geometry.down_idx)
        return done, StageState(coarse_geometry, self.down(sampled))


class DecoderStage(Module):
    def __init__(self, config: ModelConfig, s: int, rng, dtype):
        width, coarse = config.channels[s], config.channels[s + 1]
        self.up = MLP([coarse + width, width], rng, dtype, final_act=True)
        self.local, self.glob = _blocks(config, width, rng, dtype)

    @staticmethod
    def fuse(coarse: StageState, skip: StageState) -> DiffArray:
        """Interpolated coarse features concatenated with the skip features."""
        g = skip.geometry
        if g.up_idx is None or g.up_idx.shape[-2] != skip.skip_features.shape[-2]:
            raise K.ContractError("decoder: skip stage has no interpolation onto it from the coarse stage")
        if g.down_idx.shape[-1] != coarse.features.shape[-2]:
            raise K.ContractError(f"decoder: coarse stage has {coarse.features.shape[-2]} points, "
                                  f"skip stage downsamples to {g.down_idx.shape[-1]}")
        gathered = K.take_rows(coarse.features, g.up_idx)
        w = DiffArray(g.up_w[..., None].astype(coarse.features.dtype))
        interp = K.reduce("sum", K.mul(gathered, w), axis=-2)
        return K.concat([interp, skip.skip_features], axis=-1)

    def __call__(self, coarse: StageState, skip: StageState) -> StageState:
        f = self.up(self.fuse(coarse, skip))
        f = self.local(f, skip.geometry.local)
        if self.glob is not None:
            f = self.glob(f)
        return StageState(skip.geometry, f)


class GSTran(Module):
    """Segmentation network producing per-point class logits."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        c0 = config.channels[0]
        self.embed = MLP([6, c0, c0], rng, dtype)
        self.encoders = [EncoderStage(config, s, rng, dtype) for s in range(config.stage_count)]
        self.decoders = [DecoderStage(config, s, rng, dtype) for s in range(config.stage_count - 1)]
        self.head = MLP([c0, c0, config.class_count], rng, dtype)
        self.condition = None
        if config.category_count:
            self.condition = Linear(config.category_count, c0, rng, dtype, bias=False)
        self.stage_shapes: list[tuple[int, int]] = []
        self._dropout_rng = np.random.default_rng(config.seed + 1)

    @property
    def dtype(self):
        return self.config.dtype

    def embed_points(self, positions, normals) -> DiffArray:
        x = np.concatenate([positions, normals], axis=-1).astype(self.dtype)
        return self.embed(DiffArray(x))

    def condition_features(self, features: DiffArray, category_onehot) -> DiffArray:
        """Add the projected one-hot object category to every point's features.

        Equivalent to concatenating the one-hot before a classifier whose
        feature block is the identity.
        """
        if self.condition is None:
            return features
        onehot = np.asarray(category_onehot, dtype=self.dtype)
        if onehot.shape[-1] != self.config.category_count:
            raise ValueError(f"category one-hot must have width {self.config.category_count}, got {onehot.shape}")
        onehot = onehot.reshape(-1, 1, self.config.category_count)
        return K.add(features, self.condition(DiffArray(onehot)))

    def features(self, pyramid: list[StageGeometry]) -> DiffArray:
        """Encoder-decoder output at full resolution, ``(B, N, base_channels)``."""
        if len(pyramid) != self.config.stage_count:
            raise K.ContractError(f"pyramid has {len(pyramid)} stages, model expects {self.config.stage_count}")
        g0 = pyramid[0]
        state = StageState(g0, self.embed_points(g0.positions, g0.normals))
        skips = []
        self.stage_shapes = []
        for s, enc in enumerate(self.encoders):
            coarse_geom = pyramid[s + 1] if s + 1 < len(pyramid) else None
            done, state = enc(state, coarse_geom)
            self.stage_shapes.append(done.shape)
            skips.append(done)
        state = skips[-1]
        for s in reversed(range(len(self.decoders))):
            state = self.decoders[s](state, skips[s])
        return state.features

    def forward(self, pyramid: list[StageGeometry], category_onehot=None, train: bool = False) -> DiffArray:
        f = self.features(pyramid)
        if category_onehot is not None or self.condition is not None:
            if category_onehot is None:
                raise ValueError("category conditioning is enabled; pass a one-hot category")
            f = self.condition_features(f, category_onehot)
        h = K.relu(self.head.layers[0](f))
        if train and self.config.dropout > 0:
            h = K.dropout(h, self.config.dropout, self._dropout_rng)
        return self.head.layers[1](h)

    __call__ = forward

    def prepare(self, cloud: PointCloud, fps_start: int = 0) -> list[StageGeometry]:
        """Pyramid for one cloud, estimating normals first when none are supplied."""
        normals = cloud.normals
        if normals is None:
            if self.config.input_has_normals:
                raise K.ContractError("cloud has no normals; run estimate_normals first")
            normals = estimate_normals(cloud.positions, min(self.config.normal_k, len(cloud))).normals
        return build_pyramid(cloud.positions, normals, self.config, fps_start)

    def predict_logits(self, cloud: PointCloud, category: int | None = None, fps_start: int = 0) -> np.ndarray:
        onehot = None
        if self.condition is not None:
            onehot = np.eye(self.config.category_count)[[category or 0]]
        with K.no_grad():
            return self.forward(self.prepare(cloud, fps_start), onehot).values[0]


def model_forward(cloud: PointCloud, model: GSTran, category: int | None = None, fps_start: int = 0) -> np.ndarray:
    """``N x class_count`` logits for a single cloud."""
    return model.predict_logits(cloud, category, fps_start)
