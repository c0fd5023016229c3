"""Synthetic two-part shapes with analytic normals, and the on-disk dataset manifest."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, knn
from .io import read_xyz_table, write_xyz_table

FAMILIES = ("plane_with_fin", "two_boxes", "l_bracket")
PART_NAMES = {
    "plane_with_fin": ["plane", "fin"],
    "two_boxes": ["base", "top"],
    "l_bracket": ["plate", "wall"],
}
MIXED_K = 24
MIXED_MIN_FRACTION = 0.05


@dataclass
class SyntheticSpec:
    family: str = "plane_with_fin"
    points: int = 512
    noise: float = 0.01
    train_count: int = 200
    test_count: int = 50
    seed: int = 0
    ratio: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.points < 2:
            raise ValueError("need at least 2 points per cloud")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie strictly between 0 and 1")


@dataclass
class DatasetManifest:
    root: Path
    format: str
    splits: dict[str, list[str]]
    class_names: list[str]
    mode: str = "semantic"
    categories: dict[str, int] = field(default_factory=dict)
    synthetic: dict | None = None

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def files(self, split: str) -> list[Path]:
        if split not in self.splits:
            raise KeyError(f"manifest has no split {split!r}; available: {sorted(self.splits)}")
        return [self.root / f for f in self.splits[split]]

    def load(self, split: str) -> list[PointCloud]:
        clouds = []
        for path in self.files(split):
            cloud = read_xyz_table(path)
            cloud.category = self.categories.get(Path(path).name)
            cloud.validate(self.class_count, tol=1e-5)
            clouds.append(cloud)
        return clouds

    def save(self) -> Path:
        path = self.root / "manifest.json"
        data = {k: v for k, v in asdict(self).items() if k != "root"}
        path.write_text(json.dumps(data, indent=2) + "\n")
        return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    data = json.loads(path.read_text())
    m = DatasetManifest(root=root, **data)
    for split in m.splits:
        for f in m.files(split):
            if not f.is_file():
                raise FileNotFoundError(f"manifest lists missing file {f}")
    return m


def _rect(rng, n, u_range, v_range):
    return rng.uniform(u_range[0], u_range[1], n), rng.uniform(v_range[0], v_range[1], n)


def _yaw(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _plane_with_fin(rng, n0, n1):
    x, y = _rect(rng, n0, (-1, 1), (-1, 1))
    plane = np.stack([x, y, np.zeros(n0)], 1)
    x0, h = rng.uniform(-0.5, 0.5), rng.uniform(0.5, 1.0)
    y1, z1 = _rect(rng, n1, (-1, 1), (0, h))
    fin = np.stack([np.full(n1, x0), y1, z1], 1)
    side = rng.choice([-1.0, 1.0], n1)
    nrm = np.vstack([np.tile([0.0, 0.0, 1.0], (n0, 1)), np.stack([side, np.zeros(n1), np.zeros(n1)], 1)])
    return np.vstack([plane, fin]), nrm


def _l_bracket(rng, n0, n1):
    x, y = _rect(rng, n0, (0, 1), (-1, 1))
    plate = np.stack([x, y, np.zeros(n0)], 1)
    h = rng.uniform(0.5, 1.0)
    y1, z1 = _rect(rng, n1, (-1, 1), (0, h))
    wall = np.stack([np.zeros(n1), y1, z1], 1)
    nrm = np.vstack([np.tile([0.0, 0.0, 1.0], (n0, 1)), np.tile([1.0, 0.0, 0.0], (n1, 1))])
    return np.vstack([plate, wall]), nrm


def _box_surface(rng, n, lo, hi, skip_bottom=False):
    """Area-weighted uniform samples on the faces of an axis-aligned box."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []
    for axis in range(3):
        for sign in (-1, 1):
            if skip_bottom and axis == 2 and sign == -1:
                continue
            u, v = [a for a in range(3) if a != axis]
            faces.append((axis, sign, u, v, size[u] * size[v]))
    area = np.array([f[4] for f in faces])
    which = rng.choice(len(faces), n, p=area / area.sum())
    pts, nrm = np.zeros((n, 3)), np.zeros((n, 3))
    for f, (axis, sign, u, v, _) in enumerate(faces):
        sel = which == f
        m = int(sel.sum())
        p = np.empty((m, 3))
        p[:, axis] = hi[axis] if sign > 0 else lo[axis]
        p[:, u] = rng.uniform(lo[u], hi[u], m)
        p[:, v] = rng.uniform(lo[v], hi[v], m)
        pts[sel] = p
        nrm[sel, axis] = sign
    return pts, nrm


def _two_boxes(rng, n0, n1):
    w = rng.uniform(0.3, 0.6)
    p0, m0 = _box_surface(rng, n0, (-1, -1, 0), (1, 1, 0.5))
    p1, m1 = _box_surface(rng, n1, (-w, -w, 0.5), (w, w, 0.5 + 2 * w), skip_bottom=True)
    return np.vstack([p0, p1]), np.vstack([m0, m1])


_BUILDERS = {"plane_with_fin": _plane_with_fin, "two_boxes": _two_boxes, "l_bracket": _l_bracket}


def mixed_fraction(cloud: PointCloud, k: int = MIXED_K) -> float:
    """Fraction of points whose k-neighborhood contains more than one label."""
    idx = knn(cloud.positions, cloud.positions, min(k, len(cloud))).indices
    lab = cloud.labels[idx]
    return float(np.mean(np.any(lab != lab[:, :1], axis=1)))


def synth_cloud(family: str, points: int, seed: int, noise: float = 0.0, ratio: float = 0.5) -> PointCloud:
    """One cloud of the family; ``round(ratio * points)`` points get label 0."""
    rng = np.random.default_rng(seed)
    n0 = min(max(int(round(ratio * points)), 1), points - 1)
    pos, nrm = _BUILDERS[family](rng, n0, points - n0)
    labels = np.repeat([0, 1], [n0, points - n0])
    rot = _yaw(rng.uniform(0, 2 * np.pi))
    pos, nrm = pos @ rot.T, nrm @ rot.T
    if noise > 0:
        pos = pos + rng.normal(0, noise, pos.shape)
    order = rng.permutation(points)
    return PointCloud(pos[order], normals=nrm[order], labels=labels[order])


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write ``train/`` and ``test/`` xyz tables plus ``manifest.json``.

    Cloud ``i`` (counting train then test) is drawn with seed ``spec.seed + i``.
    """
    out = Path(out_dir)
    splits = {}
    index = 0
    for split, count in (("train", spec.train_count), ("test", spec.test_count)):
        (out / split).mkdir(parents=True, exist_ok=True)
        names = []
        for j in range(count):
            cloud = synth_cloud(spec.family, spec.points, spec.seed + index, spec.noise, spec.ratio)
            frac = mixed_fraction(cloud)
            if frac < MIXED_MIN_FRACTION:
                raise RuntimeError(f"cloud {index}: only {frac:.3f} of points have mixed-label neighborhoods")
            name = f"{split}/{j:05d}.txt"
            write_xyz_table(cloud, out / name)
            names.append(name)
            index += 1
        splits[split] = names
    manifest = DatasetManifest(root=out, format="xyz_table", splits=splits, class_names=PART_NAMES[spec.family],
                               synthetic=asdict(spec))
    manifest.save()
    return manifest


def synthetic_clouds(spec: SyntheticSpec) -> tuple[list[PointCloud], list[PointCloud]]:
    """In-memory train/test clouds, identical to what :func:`generate_synthetic` writes."""
    train = [synth_cloud(spec.family, spec.points, spec.seed + i, spec.noise, spec.ratio)
             for i in range(spec.train_count)]
    test = [synth_cloud(spec.family, spec.points, spec.seed + spec.train_count + i, spec.noise, spec.ratio)
            for i in range(spec.test_count)]
    return train, test
