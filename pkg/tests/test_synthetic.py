import numpy as np
import pytest

from gstran.synthetic import (FAMILIES, SyntheticSpec, generate_synthetic, load_manifest, mixed_fraction,
                              synth_cloud, synthetic_clouds)


@pytest.mark.parametrize("family", FAMILIES)
def test_counts_labels_and_unit_normals(family):
    for seed in range(5):
        c = synth_cloud(family, 512, seed, noise=0.01)
        assert len(c) == 512
        assert set(np.unique(c.labels)) == {0, 1}
        np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1, atol=1e-12)
        assert mixed_fraction(c) >= 0.05


def test_plane_with_fin_analytic_normals():
    for seed in range(10):
        c = synth_cloud("plane_with_fin", 400, seed, noise=0.0)
        plane, fin = c.labels == 0, c.labels == 1
        np.testing.assert_allclose(np.abs(c.normals[plane]), np.tile([0, 0, 1], (plane.sum(), 1)), atol=1e-12)
        np.testing.assert_allclose(c.normals[fin, 2], 0, atol=1e-12)
        # noise-free plane points lie at z = 0, fin points on the plane x' = const with their normal
        np.testing.assert_allclose(c.positions[plane, 2], 0, atol=1e-12)
        offsets = np.einsum("ij,ij->i", c.positions[fin], c.normals[fin] * np.sign(c.normals[fin, :1] + 1e-300))
        assert np.ptp(np.abs(offsets)) < 1e-9


@pytest.mark.parametrize("n", [512, 511, 7])
def test_ratio_allocation(n):
    c = synth_cloud("plane_with_fin", n, 0, ratio=0.5)
    assert abs(int((c.labels == 0).sum()) - n / 2) <= 1


def test_ratio_uneven():
    c = synth_cloud("two_boxes", 500, 0, ratio=0.3)
    assert int((c.labels == 0).sum()) == 150


def test_deterministic_files(tmp_path):
    spec = SyntheticSpec(points=64, train_count=3, test_count=2, seed=7)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    for split in ("train", "test"):
        for fa in sorted((tmp_path / "a" / split).iterdir()):
            assert fa.read_bytes() == (tmp_path / "b" / split / fa.name).read_bytes()


def test_manifest_and_in_memory_agree(tmp_path):
    spec = SyntheticSpec(points=64, train_count=3, test_count=2, seed=11)
    generate_synthetic(spec, tmp_path)
    m = load_manifest(tmp_path)
    assert m.class_names == ["plane", "fin"] and len(m.splits["test"]) == 2
    train, test = synthetic_clouds(spec)
    for a, b in zip(m.load("train") + m.load("test"), train + test):
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_manifest_missing_file(tmp_path):
    generate_synthetic(SyntheticSpec(points=32, train_count=2, test_count=1), tmp_path)
    (tmp_path / "train" / "00001.txt").unlink()
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path)


def test_bad_spec():
    with pytest.raises(ValueError):
        SyntheticSpec(family="sphere")
    with pytest.raises(ValueError):
        SyntheticSpec(ratio=1.0)
