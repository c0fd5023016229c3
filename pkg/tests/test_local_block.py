import math

import numpy as np
import pytest

from gstran import kernel as K
from gstran.geometry import PointCloud
from gstran.kernel import DiffArray
from gstran.local_block import (LocalGeometricBlock, LocalGeometry, build_local_geometry, combine_weights,
                                distance_weight, geometric_weight, local_geo_forward,
                                tangent_plane_distance)

from fd import check_grads, numeric_grad, rel_err


@pytest.fixture
def f64():
    with K.precision(np.float64):
        yield


def test_tangent_plane_distance_cases():
    assert tangent_plane_distance([0, 0, 1], [0, 0, 0], [0, 0, 1]) == 1.0
    assert tangent_plane_distance([0.3, 2, 1], [0.3, 2, 1], [0, 1, 0]) == 0.0
    assert tangent_plane_distance([1, 0, 0], [0, 0, 0], [0, 0, 1]) == 0.0
    assert tangent_plane_distance([0, 0, 0], [0, 0, 1], [0, 0, 1]) == -1.0


def test_tangent_plane_distance_rejects_non_unit_normal():
    with pytest.raises(K.ContractError):
        tangent_plane_distance([0, 0, 1], [0, 0, 0], [0, 0, 2])


def test_geometric_weight():
    assert geometric_weight(0.0) == 1.0
    assert geometric_weight(1.0) == pytest.approx(0.367879, abs=1e-6)
    assert geometric_weight(-1.0) == geometric_weight(1.0)


def test_distance_weight():
    assert distance_weight(1.0) == pytest.approx(1.0, abs=1e-7)
    assert distance_weight(0.0) == pytest.approx(1e8)
    d = np.sort(np.random.default_rng(0).uniform(0, 5, 50))
    assert np.all(np.diff(distance_weight(d)) < 0)


def test_combine_uniform_inputs_give_uniform_rows(f64):
    for op in ("hadamard", "sum", "average"):
        w, flagged = combine_weights(np.full((3, 5), 0.7), np.full((3, 5), 0.2), op)
        np.testing.assert_allclose(w.values, 0.2)
        assert not flagged.any()


def test_fig3_configuration(f64):
    p = np.array([1.0, 0, 0])
    qa, na = np.array([0.0, 0, 0]), np.array([0.0, 0, 1])
    qb, nb = np.array([2.0, 0, 0]), np.array([1.0, 0, 0])
    dt = np.array([[tangent_plane_distance(p, qa, na), tangent_plane_distance(p, qb, nb)]])
    d = np.array([[np.linalg.norm(p - qa), np.linalg.norm(p - qb)]])
    w, _ = combine_weights(distance_weight(d), geometric_weight(dt), "hadamard")
    e = math.exp(-1)
    np.testing.assert_allclose(w.values[0], [1 / (1 + e), e / (1 + e)], atol=1e-12)
    assert round(w.values[0, 0], 4) == 0.7311 and round(w.values[0, 1], 4) == 0.2689


def test_hadamard_with_unit_geometric_equals_normalized_distance(f64):
    d = np.random.default_rng(1).uniform(0.1, 2, size=(4, 6))
    w, _ = combine_weights(distance_weight(d), np.ones_like(d), "hadamard")
    dw = distance_weight(d)
    np.testing.assert_allclose(w.values, dw / dw.sum(axis=1, keepdims=True), rtol=1e-14)


def test_concat_fallback_row_is_uniform(f64):
    rng = np.random.default_rng(2)
    from gstran.nn import Linear
    red = Linear(2, 1, rng)
    red.weight.values[:] = -1.0
    red.bias.values[:] = -1.0
    w, flagged = combine_weights(np.ones((2, 4)), np.ones((2, 4)), "concat", red)
    np.testing.assert_allclose(w.values, 0.25)
    assert flagged.all()


def test_unknown_combine_op():
    with pytest.raises(ValueError):
        combine_weights(np.ones((1, 2)), np.ones((1, 2)), "max")


def test_equal_distance_smaller_dtan_wins_100_configs(f64):
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 100:
        p = rng.normal(size=3)
        r = rng.uniform(0.1, 2)
        dirs = rng.normal(size=(2, 3))
        q = p + r * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        n = rng.normal(size=(2, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        dt = tangent_plane_distance(p, q, n)
        if abs(abs(dt[0]) - abs(dt[1])) < 1e-6:
            continue
        d = np.linalg.norm(p - q, axis=1)
        w, _ = combine_weights(distance_weight(d)[None], geometric_weight(dt)[None], "hadamard")
        near = int(np.argmin(np.abs(dt)))
        assert w.values[0, near] > w.values[0, 1 - near]
        checked += 1


def _cloud(n, c, seed=0):
    rng = np.random.default_rng(seed)
    nrm = rng.normal(size=(n, 3))
    return PointCloud(rng.uniform(size=(n, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True),
                      rng.normal(size=(n, c)))


def test_combined_rows_sum_to_one_nonnegative(f64):
    cloud = _cloud(40, 4)
    for op in ("hadamard", "sum", "average", "concat"):
        block = LocalGeometricBlock(4, np.random.default_rng(0), combine_op=op)
        geom = build_local_geometry(cloud.positions, cloud.normals, 8)
        lw = block.weights(geom)
        np.testing.assert_allclose(lw.combined_w.values.sum(-1), 1.0, atol=1e-6)
        assert np.all(lw.combined_w.values >= 0)
        assert np.all((lw.geometric_w > 0) & (lw.geometric_w <= 1))
        assert np.all(np.isfinite(lw.combined_w.values))


def test_single_point_self_aggregation(f64):
    cloud = PointCloud([[0.2, 0.1, 0.0]], [[0, 0, 1.0]], [[1.0, -2.0, 0.5]])
    block = LocalGeometricBlock(3, np.random.default_rng(1))
    out = local_geo_forward(cloud, block, k=1)
    x = DiffArray(cloud.features)
    expect = x.values + block.output_projection(block.value_projection(x)).values
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_uniform_features_coplanar_cloud(f64):
    rng = np.random.default_rng(2)
    pos = np.column_stack([rng.uniform(size=(30, 2)), np.zeros(30)])
    cloud = PointCloud(pos, np.tile([0, 0, 1.0], (30, 1)), np.tile([0.3, -1.0, 2.0, 0.0], (30, 1)))
    out = local_geo_forward(cloud, LocalGeometricBlock(4, rng), k=6)
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_missing_normals_error():
    with pytest.raises(K.ContractError, match="estimate_normals"):
        local_geo_forward(PointCloud(np.zeros((3, 3)), features=np.zeros((3, 2))),
                          LocalGeometricBlock(2, np.random.default_rng(0)), 2)


def test_permutation_equivariance(f64):
    cloud = _cloud(25, 6, seed=4)
    block = LocalGeometricBlock(6, np.random.default_rng(5))
    out = local_geo_forward(cloud, block, 5)
    perm = np.random.default_rng(6).permutation(25)
    out_p = local_geo_forward(cloud.subset(perm), block, 5)
    np.testing.assert_array_equal(out_p, out[perm])


def test_translation_invariance_with_given_normals(f64):
    cloud = _cloud(25, 6, seed=7)
    block = LocalGeometricBlock(6, np.random.default_rng(8))
    moved = PointCloud(cloud.positions + [3.0, -2.0, 0.5], cloud.normals, cloud.features)
    np.testing.assert_allclose(local_geo_forward(moved, block, 5), local_geo_forward(cloud, block, 5),
                               atol=1e-9)


def test_distance_only_equals_unit_geometric_bitwise(f64):
    cloud = _cloud(20, 4, seed=9)
    both = LocalGeometricBlock(4, np.random.default_rng(10), weight_mode="both")
    dist_only = LocalGeometricBlock(4, np.random.default_rng(10), weight_mode="distance")
    geom = build_local_geometry(cloud.positions, cloud.normals, 5)
    flat = LocalGeometry(geom.idx, geom.dist, np.zeros_like(geom.dtan))
    x = DiffArray(cloud.features[None])
    assert np.array_equal(both(x, flat).values, dist_only(x, geom).values)


def test_feature_space_neighbors_pair_by_rank(f64):
    cloud = _cloud(20, 4, seed=11)
    block = LocalGeometricBlock(4, np.random.default_rng(12), single_space=False)
    geom = build_local_geometry(cloud.positions, cloud.normals, 5)
    x = DiffArray(cloud.features[None])
    idx = block.neighbor_index(x, geom)
    from gstran.geometry import knn
    assert np.array_equal(idx[0], knn(cloud.features, cloud.features, 5).indices)
    w = block.weights(geom).combined_w.values
    v = block.value_projection(x).values
    agg = np.einsum("bnk,bnkc->bnc", w, v[0][idx])
    expect = x.values + block.output_projection(DiffArray(agg)).values
    np.testing.assert_allclose(block(x, geom).values, expect, atol=1e-12)


def _grad_case(op, dtype, seed=0):
    cloud = _cloud(12, 8, seed)
    block = LocalGeometricBlock(8, np.random.default_rng(seed + 1), combine_op=op)
    geom = build_local_geometry(cloud.positions, cloud.normals, 4)
    x = K.Parameter(cloud.features[None])
    target = DiffArray(np.random.default_rng(seed + 2).normal(size=(1, 12, 8)))
    return block, geom, x, target


@pytest.mark.parametrize("op", ["hadamard", "sum", "average", "concat"])
def test_gradients_double(op, f64):
    block, geom, x, target = _grad_case(op, np.float64)
    arrays = dict(block.named_parameters(), x=x)
    # the 1e8 self-distance weight makes the reducer response stiff; 1e-5 balances
    # truncation against roundoff for it
    errs = check_grads(lambda: (block(x, geom) * target).sum(), arrays, h=1e-5)
    assert max(errs.values()) < 1e-5, errs


def test_gradients_single_precision_vs_double_oracle():
    with K.precision(np.float64):
        block, geom, x, target = _grad_case("hadamard", np.float64, seed=3)
    params64 = dict(block.named_parameters(), x=x)
    snapshot = {n: p.values.copy() for n, p in params64.items()}
    with K.precision(np.float32):
        block32 = LocalGeometricBlock(8, np.random.default_rng(0))
        block32.load_state_dict({n: v for n, v in snapshot.items() if n != "x"})
        x32 = K.Parameter(snapshot["x"].astype(np.float32))
        with K.Tape():
            K.backward((block32(x32, geom) * target.values.astype(np.float32)).sum())
    analytic = dict(block32.named_parameters(), x=x32)

    def value():
        with K.no_grad():
            return (block(x, geom) * target).sum().item()

    for name, p in params64.items():
        assert rel_err(analytic[name].grad, numeric_grad(value, p)) < 1e-3, name


@pytest.mark.parametrize("op", ["hadamard", "sum", "average", "concat"])
def test_combine_weights_grad_single_precision(op):
    rng = np.random.default_rng(4)
    d64 = rng.uniform(0.2, 2.0, size=(5, 6))
    g64 = rng.uniform(0.1, 1.0, size=(5, 6))
    target = rng.normal(size=(5, 6))
    from gstran.nn import Linear
    with K.precision(np.float64):
        red64 = Linear(2, 1, np.random.default_rng(5))
        red64.weight.values[:] = np.abs(red64.weight.values) + 0.1
        dis, geo = K.Parameter(d64), K.Parameter(g64)
    with K.precision(np.float32):
        red32 = Linear(2, 1, np.random.default_rng(5))
        red32.load_state_dict(red64.state_dict())
        dis32, geo32 = K.Parameter(d64.astype(np.float32)), K.Parameter(g64.astype(np.float32))
        with K.Tape():
            w32, _ = combine_weights(dis32, geo32, op, red32)
            K.backward((w32 * target.astype(np.float32)).sum())

    def value():
        with K.no_grad():
            return (combine_weights(dis, geo, op, red64)[0] * target).sum().item()

    pairs = [(dis32, dis), (geo32, geo)]
    if op == "concat":
        pairs += [(red32.weight, red64.weight), (red32.bias, red64.bias)]
    for a32, a64 in pairs:
        assert rel_err(a32.grad, numeric_grad(value, a64)) < 1e-3
