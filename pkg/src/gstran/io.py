"""File formats: xyz tables, ascii ply, key=value configs and checkpoints.

Checkpoint layout (all integers little-endian unsigned 64-bit)::

    b"GSTRAN1"
    u64 config_length, config bytes (utf-8 key=value lines)
    u64 array_count
    per array: u64 name_length, name, u64 dtype_length, dtype string (e.g. "<f4"),
               u64 ndim, ndim x u64 extents, raw little-endian values
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

MAGIC = b"GSTRAN1"

# 16 label colors (tab20 even entries), cycled for larger label ids
PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148),
], dtype=np.uint8)

# viridis sampled at 0, 1/4, 1/2, 3/4, 1; linear in between
RAMP = np.array([(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)], dtype=np.float64)


class ParseError(ValueError):
    pass


# ----------------------------------------------------------------- xyz tables

def read_xyz_table(path) -> PointCloud:
    """Whitespace-separated rows of width 3 (xyz), 4 (+label), 6 (+normal) or 7 (+normal+label)."""
    rows, width = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].split()
            if not text:
                continue
            if len(text) not in (3, 4, 6, 7):
                raise ParseError(f"{path}:{lineno}: expected 3, 4, 6 or 7 columns, got {len(text)}")
            if width is None:
                width = len(text)
            elif len(text) != width:
                raise ParseError(f"{path}:{lineno}: ragged row ({len(text)} columns, file uses {width})")
            try:
                vals = [float(t) for t in text]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value") from None
            if width in (4, 7) and not float(vals[-1]).is_integer():
                raise ParseError(f"{path}:{lineno}: label {text[-1]!r} is not an integer")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no points")
    a = np.array(rows, dtype=np.float64)
    normals = a[:, 3:6] if width >= 6 else None
    labels = a[:, -1].astype(np.int64) if width in (4, 7) else None
    return PointCloud(a[:, :3], normals=normals, labels=labels)


def write_xyz_table(cloud: PointCloud, path) -> None:
    """Inverse of :func:`read_xyz_table`; floats are written with round-trip precision."""
    cols = [cloud.positions]
    if cloud.normals is not None:
        cols.append(cloud.normals)
    with open(path, "w") as fh:
        body = np.hstack(cols)
        for i, row in enumerate(body):
            line = " ".join(repr(float(v)) for v in row)
            if cloud.labels is not None:
                line += f" {int(cloud.labels[i])}"
            fh.write(line + "\n")


# ----------------------------------------------------------------------- ply

def label_colors(labels) -> np.ndarray:
    return PALETTE[np.asarray(labels, dtype=np.int64) % len(PALETTE)]


def ramp_colors(values, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Map scalars through the 5-stop ramp after scaling ``[lo, hi]`` to ``[0, 1]``."""
    t = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo if hi > lo else 1.0)
    t = np.clip(t, 0.0, 1.0) * (len(RAMP) - 1)
    i = np.minimum(t.astype(np.int64), len(RAMP) - 2)
    f = (t - i)[:, None]
    return np.rint(RAMP[i] * (1 - f) + RAMP[i + 1] * f).astype(np.uint8)


def write_ply(cloud: PointCloud, path, color_by: str = "label", prediction=None, weights=None,
              ramp_range: tuple[float, float] = (0.0, 1.0)) -> None:
    """Ascii ply with positions, optional normals, colors and optional label/weight columns.

    ``color_by`` is ``label`` (ground truth), ``prediction`` or ``weight_scalar``.
    Reals are written with 9 significant digits. Positions are declared
    ``float``, which makes float32 positions round-trip exactly; normals are
    declared ``double`` and round-trip to within 1e-9.
    """
    n = len(cloud)
    if color_by == "label":
        if cloud.labels is None:
            raise ValueError("color_by=label needs labels")
        colors = label_colors(cloud.labels)
    elif color_by == "prediction":
        if prediction is None:
            raise ValueError("color_by=prediction needs a prediction array")
        prediction = np.asarray(prediction, dtype=np.int64)
        colors = label_colors(prediction)
    elif color_by == "weight_scalar":
        if weights is None:
            raise ValueError("color_by=weight_scalar needs a weights array")
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        colors = ramp_colors(weights, *ramp_range)
    else:
        raise ValueError(f"unknown color_by {color_by!r}")
    header = ["ply", "format ascii 1.0", f"element vertex {n}"]
    header += [f"property float {a}" for a in "xyz"]
    if cloud.normals is not None:
        header += [f"property double {a}" for a in ("nx", "ny", "nz")]
    header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    if cloud.labels is not None:
        header.append("property int label")
    if color_by == "prediction":
        header.append("property int prediction")
    if color_by == "weight_scalar":
        header.append("property float weight")
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(n):
            parts = [f"{v:.9g}" for v in cloud.positions[i]]
            if cloud.normals is not None:
                parts += [f"{v:.9g}" for v in cloud.normals[i]]
            parts += [str(int(c)) for c in colors[i]]
            if cloud.labels is not None:
                parts.append(str(int(cloud.labels[i])))
            if color_by == "prediction":
                parts.append(str(int(prediction[i])))
            if color_by == "weight_scalar":
                parts.append(f"{weights[i]:.9g}")
            fh.write(" ".join(parts) + "\n")


def read_ply(path) -> tuple[PointCloud, dict]:
    """Read an ascii ply written by :func:`write_ply`.

    Returns the cloud and a dict of every column by property name.
    """
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ParseError(f"{path}: not a ply file")
        names, types, count = [], [], None
        for lineno, line in enumerate(fh, 2):
            words = line.split()
            if not words or words[0] == "comment":
                continue
            if words[0] == "format" and words[1] != "ascii":
                raise ParseError(f"{path}:{lineno}: only ascii ply is supported")
            if words[0] == "element" and words[1] == "vertex":
                count = int(words[2])
            elif words[0] == "property":
                names.append(words[-1])
                types.append(words[1])
            elif words[0] == "end_header":
                break
        if count is None:
            raise ParseError(f"{path}: missing vertex element")
        data = np.loadtxt(fh, ndmin=2, max_rows=count) if count else np.zeros((0, len(names)))
    if data.shape != (count, len(names)):
        raise ParseError(f"{path}: expected {count} rows of {len(names)} values, got {data.shape}")
    # declared 32-bit reals are read back at that precision
    cols = {name: data[:, j].astype(np.float32).astype(np.float64) if t in ("float", "float32") else data[:, j]
            for j, (name, t) in enumerate(zip(names, types))}
    pos = np.stack([cols[a] for a in "xyz"], axis=1)
    normals = np.stack([cols[a] for a in ("nx", "ny", "nz")], axis=1) if "nx" in cols else None
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    return PointCloud(pos, normals=normals, labels=labels), cols


# ------------------------------------------------------------- key=value text

def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def format_config(values: dict) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in values.items())


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------- checkpoints

def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = format_config(config).encode()
    buf.write(_u64(len(cfg)) + cfg)
    buf.write(_u64(len(arrays)))
    for name, arr in arrays.items():
        arr = np.array(arr, order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        nb, db = name.encode(), arr.dtype.str.encode()
        buf.write(_u64(len(nb)) + nb + _u64(len(db)) + db + _u64(arr.ndim))
        for d in arr.shape:
            buf.write(_u64(d))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ParseError(f"{path}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    def u64():
        return struct.unpack("<Q", take(8))[0]

    config = parse_config_text(take(u64()).decode())
    arrays = {}
    for _ in range(u64()):
        name = take(u64()).decode()
        dtype = np.dtype(take(u64()).decode())
        shape = tuple(u64() for _ in range(u64()))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    return config, arrays
