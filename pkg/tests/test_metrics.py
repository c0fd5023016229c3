import numpy as np
import pytest

from gstran.metrics import compute_metrics, confusion_matrix, instance_miou, object_miou


def test_perfect_diagonal():
    r = compute_metrics(np.diag([5, 7, 3]))
    assert r.oa == r.macc == r.miou == 1.0
    np.testing.assert_array_equal(r.per_class_iou, 1.0)


def test_binary_hand_case():
    r = compute_metrics([[50, 50], [0, 100]])
    assert abs(r.per_class_iou[0] - 0.5) < 1e-12
    assert abs(r.per_class_iou[1] - 100 / 150) < 1e-12
    assert abs(r.miou - (0.5 + 100 / 150) / 2) < 1e-12
    assert abs(r.oa - 0.75) < 1e-12
    assert abs(r.macc - 0.75) < 1e-12


def test_absent_class_excluded():
    cm = np.array([[4, 1, 0], [2, 3, 0], [0, 0, 0]])
    r = compute_metrics(cm)
    assert np.isnan(r.per_class_iou[2])
    assert abs(r.miou - np.mean([4 / 7, 3 / 6])) < 1e-12


def test_predicted_but_absent_in_truth_is_excluded_from_mean():
    cm = np.array([[4, 1], [0, 0]])
    r = compute_metrics(cm)
    assert r.per_class_iou[1] == 0
    assert abs(r.miou - 0.8) < 1e-12


@pytest.mark.parametrize("bad", [np.zeros((0, 0)), np.zeros((2, 3)), np.zeros((2, 2)), [[1, -1], [0, 1]]])
def test_rejects(bad):
    with pytest.raises(ValueError):
        compute_metrics(bad)


def test_confusion_rows_are_truth():
    cm = confusion_matrix([0, 1, 1, 2], [0, 0, 1, 2], 3)
    np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        confusion_matrix([3], [0], 3)


def test_metrics_bounded_and_oa_sanity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(2, 8))
        cm = rng.integers(0, 20, (k, k))
        cm[0, 0] += 1
        r = compute_metrics(cm)
        for v in (r.oa, r.macc, r.miou):
            assert 0 <= v <= 1
        assert r.oa >= np.diag(cm).max() / cm.sum()


def test_relabeling_invariance():
    rng = np.random.default_rng(1)
    cm = rng.integers(1, 30, (5, 5))
    perm = rng.permutation(5)
    a, b = compute_metrics(cm), compute_metrics(cm[np.ix_(perm, perm)])
    assert abs(a.miou - b.miou) < 1e-12 and abs(a.oa - b.oa) < 1e-12 and abs(a.macc - b.macc) < 1e-12
    np.testing.assert_allclose(a.per_class_iou[perm], b.per_class_iou)


def single_part_object(score, cat):
    """Object of a one-part category scoring ``score``: 10 true points, the tail mispredicted."""
    label = np.zeros(10, dtype=int)
    pred = np.where(np.arange(10) < round(score * 10), 0, 1)
    return pred, label, cat


def test_instance_single_perfect():
    label = np.array([0, 0, 1, 1])
    assert instance_miou([(label, label, "a")], {"a": [0, 1]}) == (1.0, 1.0)


def test_instance_absent_parts_count_one():
    label = np.array([0, 0, 0])
    assert object_miou(label, label, [0, 1, 2]) == 1.0


def test_instance_two_categories():
    objs = [single_part_object(0.8, "a"), single_part_object(0.6, "b")]
    ins, cat = instance_miou(objs, {"a": [0], "b": [0]})
    assert abs(ins - 0.7) < 1e-12 and abs(cat - 0.7) < 1e-12


def test_instance_hand_case_three_objects():
    cat_parts = {"A": [0, 1], "B": [0, 1]}
    scores = {}

    def obj(m, cat):
        # one part all correct; part 1 of size 4 with m points predicted as part 0
        label = np.array([0] * 4 + [1] * 4)
        pred = label.copy()
        pred[4:4 + m] = 0
        return pred, label, cat

    objs = [obj(1, "A"), obj(3, "A"), obj(2, "B")]
    for o in objs:
        scores.setdefault(o[2], []).append(object_miou(o[0], o[1], [0, 1]))
    ins, cat = instance_miou(objs, cat_parts)
    flat = [s for v in scores.values() for s in v]
    assert ins == np.mean(flat)
    assert cat == np.mean([np.mean(scores["A"]), np.mean(scores["B"])])


def test_instance_spec_numbers():
    objs = [single_part_object(0.9, "A"), single_part_object(0.5, "A"), single_part_object(0.8, "B")]
    ins, cat = instance_miou(objs, {"A": [0], "B": [0]})
    assert abs(ins - 2.2 / 3) < 1e-12
    assert abs(cat - 0.75) < 1e-12


def test_instance_unknown_category():
    with pytest.raises(ValueError):
        instance_miou([(np.zeros(2), np.zeros(2), "z")], {"a": [0]})
