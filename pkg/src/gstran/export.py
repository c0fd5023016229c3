"""Attention-row export for inspecting the global block of a trained model."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .global_block import GlobalSemanticBlock
from .io import write_ply
from .network import GSTran


def last_global_block(model: GSTran) -> GlobalSemanticBlock:
    """Global block of the final decoder stage (the encoder's when there is no decoder)."""
    stage = model.decoders[0] if model.decoders else model.encoders[-1]
    if stage.glob is None:
        raise ValueError("model has no global blocks (global_mode=none)")
    return stage.glob


def attention_rows(model: GSTran, cloud: PointCloud, query_index: int, category: int | None = None) -> dict:
    """Rows of the last global block's maps for one query point.

    Keys are ``head_0`` .. ``head_{H-1}``, ``similarity``, ``mask`` and
    ``refined``. All maps are recorded whatever aggregation mode the block
    uses; they depend only on the block input.
    """
    n = len(cloud)
    if not 0 <= query_index < n:
        raise IndexError(f"query index {query_index} outside [0, {n})")
    block = last_global_block(model)
    saved = block.mode, block.record
    block.mode, block.record = "full", True
    try:
        model.predict_logits(cloud, category)
    finally:
        block.mode, block.record = saved
    st = block.last
    rows = {f"head_{h}": st.per_head[0, h, query_index] for h in range(st.per_head.shape[1])}
    rows["similarity"] = st.global_similarity[0, query_index]
    rows["mask"] = st.global_mask[0, query_index]
    rows["refined"] = st.refined[0, query_index]
    return {k: np.asarray(v, dtype=np.float64) for k, v in rows.items()}


def dump_attention(model: GSTran, cloud: PointCloud, query_index: int, out_dir, category: int | None = None) -> list[Path]:
    """Write each attention row as a weight-colored ply and a one-value-per-line text file.

    Colors span the ramp from 0 to the row maximum.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = attention_rows(model, cloud, query_index, category)
    plain = PointCloud(cloud.positions, normals=cloud.normals)
    written = []
    for name, row in rows.items():
        ply, txt = out / f"{name}.ply", out / f"{name}.txt"
        write_ply(plain, ply, color_by="weight_scalar", weights=row, ramp_range=(0.0, float(row.max())))
        np.savetxt(txt, row, fmt="%.9g")
        written += [ply, txt]
    return written
