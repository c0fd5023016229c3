"""Global semantic transformer with multi-head voting.

A full-width attention map (the global similarity) is gated by the mean of
per-head attention maps computed from channel splits of the same queries
and keys (the global mask). Their row-renormalized product, the refined
similarity, aggregates the projected values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import DiffArray
from .nn import Linear, Module

GLOBAL_MODES = ("full", "similarity", "mask")


@dataclass
class AttentionStack:
    per_head: np.ndarray
    global_similarity: np.ndarray
    global_mask: np.ndarray
    refined: np.ndarray


class GlobalSemanticBlock(Module):
    """Global attention over all points of a cloud.

    ``mode`` picks the aggregation map: ``full`` (refined similarity),
    ``similarity`` (plain softmax attention) or ``mask`` (head vote only).
    When ``record`` is set the last forward keeps an :class:`AttentionStack`.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, mode: str = "full",
                 renormalize: bool = True, dtype=None):
        if heads < 1 or channels % heads:
            raise ValueError(f"head count {heads} must divide channel width {channels}")
        if mode not in GLOBAL_MODES:
            raise ValueError(f"unknown global mode {mode!r}")
        self.channels = channels
        self.heads = heads
        self.query_projection = Linear(channels, channels, rng, dtype)
        self.key_projection = Linear(channels, channels, rng, dtype)
        self.value_projection = Linear(channels, channels, rng, dtype)
        self.output_projection = Linear(channels, channels, rng, dtype)
        self.mode = mode
        self.renormalize = renormalize
        self.record = False
        self.last: AttentionStack | None = None
        self.fallback_rows = 0

    def _qk(self, features):
        if features.shape[-1] != self.channels:
            raise K.DimensionError(f"global block expects {self.channels} channels, got {features.shape}")
        return self.query_projection(features), self.key_projection(features)

    def similarity_from(self, q, k) -> DiffArray:
        logits = K.matmul(q, K.transpose(k, _swap_last(k.ndim)))
        return K.softmax_rows(K.mul(logits, 1.0 / math.sqrt(self.channels)))

    def heads_from(self, q, k) -> DiffArray:
        *lead, n, c = q.shape
        h, d = self.heads, c // self.heads
        nl = len(lead)
        split = (*lead, n, h, d)
        qh = K.transpose(K.reshape(q, split), (*range(nl), nl + 1, nl, nl + 2))
        kh = K.transpose(K.reshape(k, split), (*range(nl), nl + 1, nl + 2, nl))
        return K.softmax_rows(K.mul(K.matmul(qh, kh), 1.0 / math.sqrt(d)))

    def attention(self, features: DiffArray):
        """Return ``(weights, stack_parts)`` for the configured mode."""
        q, k = self._qk(features)
        sim = self.similarity_from(q, k) if self.mode != "mask" else None
        heads = mask = refined = None
        if self.mode != "similarity":
            heads = self.heads_from(q, k)
            mask = global_mask(heads)
        if self.mode == "full":
            refined, dead = refined_similarity(sim, mask, self.renormalize)
            self.fallback_rows = int(dead.sum())
        weights = {"full": refined, "similarity": sim, "mask": mask}[self.mode]
        return weights, (heads, sim, mask, refined)

    def __call__(self, features: DiffArray) -> DiffArray:
        weights, parts = self.attention(features)
        if self.record:
            self.last = AttentionStack(*(None if p is None else p.values.copy() for p in parts))
        agg = K.matmul(weights, self.value_projection(features))
        return K.add(features, self.output_projection(agg))


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def global_similarity(features: DiffArray, block: GlobalSemanticBlock) -> DiffArray:
    return block.similarity_from(*block._qk(K.as_array(features)))


def multi_head_attentions(features: DiffArray, block: GlobalSemanticBlock) -> DiffArray:
    """Per-head maps, shape ``(*B, H, N, N)``."""
    return block.heads_from(*block._qk(K.as_array(features)))


def global_mask(per_head: DiffArray) -> DiffArray:
    """Average of the head maps over the head axis (third from last)."""
    per_head = K.as_array(per_head)
    h = per_head.shape[-3]
    return K.mul(K.reduce("sum", per_head, axis=-3), 1.0 / h)


def refined_similarity(sim: DiffArray, mask: DiffArray, renormalize: bool = True):
    """Hadamard product of similarity and mask, rows renormalized.

    Returns ``(refined, fallback)``; rows whose product sums to zero become
    uniform and are flagged in ``fallback``.
    """
    sim, mask = K.as_array(sim), K.as_array(mask)
    if sim.shape != mask.shape:
        raise K.DimensionError(f"refined_similarity: {sim.shape} vs {mask.shape}")
    prod = K.mul(sim, mask)
    if not renormalize:
        return prod, np.zeros(prod.shape[:-1], dtype=bool)
    return K.normalize_rows(prod)


def global_sem_forward(features, block: GlobalSemanticBlock) -> DiffArray:
    return block(K.as_array(features))
