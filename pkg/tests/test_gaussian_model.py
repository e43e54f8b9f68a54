import math

import numpy as np
import pytest

from artigauss.geometry import axis_angle_matrix, matrix_to_rot6d
from artigauss.gaussian_model import (
    SCALE_MAX,
    SCALE_MIN,
    GaussianSet,
    SoftAssignment,
    assign_hard,
    assign_soft,
    covariance,
    fuse_to_step,
    gumbel_noise,
    mahalanobis_all,
    mahalanobis_sq,
    transform_points,
)


def single(R=np.eye(3), mu=(0, 0, 0), scales=(1, 1, 1), K=1):
    r6 = matrix_to_rot6d(R).as_array()
    return GaussianSet(np.tile(r6, (1, K, 1)), np.tile(np.asarray(mu, float), (1, K, 1)), np.log([scales]))


def random_set(rng, m=3, K=4):
    rot6d = rng.normal(size=(m, K, 6))
    return GaussianSet(rot6d, rng.normal(size=(m, K, 3)), rng.uniform(-1, 0.5, size=(m, 3)))


def test_covariance_examples():
    assert np.allclose(covariance(single(), 0, 0), np.eye(3))
    assert np.allclose(covariance(single(scales=(2, 1, 0.5)), 0, 0), np.diag([4, 1, 0.25]))
    Rz = axis_angle_matrix(np.array([0, 0, 1.0]), math.pi / 2)
    assert np.allclose(covariance(single(R=Rz, scales=(2, 1, 1)), 0, 0), np.diag([1, 4, 1]))


def test_covariance_index_errors():
    g = single()
    with pytest.raises(IndexError):
        covariance(g, 1, 0)
    with pytest.raises(IndexError):
        covariance(g, 0, 1)


def test_covariance_spd_and_determinant():
    rng = np.random.default_rng(0)
    g = random_set(rng)
    for i in range(g.m):
        for k in range(g.num_timesteps):
            S = covariance(g, i, k)
            assert np.allclose(S, S.T)
            assert np.linalg.eigvalsh(S).min() > 0
            det = math.exp(2 * g.log_scales[i].sum())
            assert abs(np.linalg.det(S) - det) <= 1e-9 * det


def test_scales_are_clamped():
    g = GaussianSet(np.tile([1.0, 0, 0, 0, 1, 0], (1, 1, 1)), np.zeros((1, 1, 3)), [[-50.0, 0.0, 50.0]])
    s = np.exp(g.log_scales[0])
    assert s[0] == pytest.approx(SCALE_MIN) and s[2] == pytest.approx(SCALE_MAX)


def test_mahalanobis_examples():
    g = single(mu=(1, 2, 3))
    assert mahalanobis_sq([1, 2, 3], g, 0, 0) == 0
    assert mahalanobis_sq([4, 6, 3], g, 0, 0) == pytest.approx(25)
    assert mahalanobis_sq([2, 0, 0], single(scales=(2, 1, 1)), 0, 0) == pytest.approx(1)


def test_mahalanobis_matches_inverse_covariance():
    rng = np.random.default_rng(1)
    g = random_set(rng)
    x = rng.normal(size=(20, 3))
    d = mahalanobis_all(x, g, 2)
    for i in range(g.m):
        inv = np.linalg.inv(covariance(g, i, 2))
        v = x - g.centers[i, 2]
        assert np.allclose(d[:, i], np.einsum("ni,ij,nj->n", v, inv, v), rtol=1e-9)
        assert d[0, i] == pytest.approx(mahalanobis_sq(x[0], g, i, 2), rel=1e-12)


def two(mu0, s0, mu1, s1, K=1):
    a, b = single(mu=mu0, scales=s0, K=K), single(mu=mu1, scales=s1, K=K)
    return GaussianSet(np.concatenate([a.rot6d, b.rot6d]), np.concatenate([a.centers, b.centers]),
                       np.concatenate([a.log_scales, b.log_scales]))


def test_assign_hard_examples():
    assert (assign_hard(np.random.default_rng(0).normal(size=(10, 3)), single(), 0) == 0).all()
    g = two((0, 0, 0), (1, 1, 1), (10, 0, 0), (1, 1, 1))
    assert assign_hard([[1, 0, 0]], g, 0)[0] == 0
    g = two((0, 0, 0), (10, 1, 1), (4, 0, 0), (1, 1, 1))
    d = mahalanobis_all([[3, 0, 0]], g, 0)[0]
    assert d == pytest.approx([0.09, 1.0])
    assert assign_hard([[3, 0, 0]], g, 0)[0] == 0


def test_assign_hard_ties_lowest_index():
    g = two((-1, 0, 0), (1, 1, 1), (1, 0, 0), (1, 1, 1))
    assert assign_hard([[0, 0, 0]], g, 0)[0] == 0


def test_assign_hard_rigid_equivariance():
    rng = np.random.default_rng(2)
    g = random_set(rng, m=4, K=1)
    x = rng.normal(size=(200, 3))
    W = axis_angle_matrix(np.array([1.0, 2, 3]) / math.sqrt(14), 0.8)
    w = np.array([0.3, -1.0, 2.0])
    R = np.stack([g.rotation(i, 0) for i in range(g.m)])
    moved = GaussianSet(
        np.stack([matrix_to_rot6d(W @ R[i]).as_array()[None] for i in range(g.m)]),
        g.centers @ W.T + w, g.log_scales,
    )
    assert (assign_hard(x, g, 0) == assign_hard(x @ W.T + w, moved, 0)).all()


def test_assign_soft_examples():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 3))
    assert np.allclose(assign_soft(x, single(), 0).weights, 1)
    g = two((-1, 0, 0), (1, 1, 1), (1, 0, 0), (1, 1, 1))
    assert np.allclose(assign_soft([[0, 0, 0]], g, 0).weights, [[0.5, 0.5]])
    with pytest.raises(ValueError):
        assign_soft(x, g, 0, temperature=0)


def test_assign_soft_low_temperature_matches_hard():
    rng = np.random.default_rng(4)
    g = GaussianSet.static(np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0]], float), 1, 0.5)
    x = np.concatenate([c + 0.4 * rng.normal(size=(100, 3)) for c in g.centers[:, 0]])
    w = assign_soft(x, g, 0, temperature=0.01).weights
    assert (w.argmax(1) == assign_hard(x, g, 0)).mean() >= 0.99
    d = np.sort(mahalanobis_all(x, g, 0), axis=1)
    clear = d[:, 1] - d[:, 0] > 0.1
    assert (w.argmax(1)[clear] == assign_hard(x, g, 0)[clear]).all()


@pytest.mark.parametrize("temperature", [0.1, 1.0, 10.0])
def test_soft_rows_sum_to_one(temperature):
    rng = np.random.default_rng(5)
    g = random_set(rng, m=5, K=1)
    x = rng.normal(size=(100, 3)) * 3
    w = assign_soft(x, g, 0, temperature, gumbel_noise(rng, (100, 5))).weights
    assert np.abs(w.sum(1) - 1).max() <= 1e-6
    assert (w >= 0).all() and (w <= 1).all()


def test_soft_assignment_hard_labels():
    assert (SoftAssignment(np.array([[0.2, 0.8], [0.6, 0.4]])).hard() == [1, 0]).all()


def translating(K=3):
    centers = np.array([[[float(k), 0, 0] for k in range(K)]])
    return GaussianSet(np.tile([1.0, 0, 0, 0, 1, 0], (1, K, 1)), centers, [[0.0, 0, 0]])


def test_transform_points_examples():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(30, 3))
    g = random_set(rng)
    assert np.allclose(transform_points(x, np.zeros(30, int), g, 2, 2), x)
    static = GaussianSet.static(np.zeros((1, 3)), 4, 1.0)
    assert np.allclose(transform_points(x, np.zeros(30, int), static, 0, 3), x)
    assert np.allclose(transform_points(x, np.zeros(30, int), translating(), 0, 2), x + [2, 0, 0])


def test_transform_points_round_trip():
    rng = np.random.default_rng(7)
    g = random_set(rng)
    x = rng.normal(size=(40, 3))
    labels = assign_hard(x, g, 1)
    y = transform_points(x, labels, g, 1, 3)
    assert np.abs(transform_points(y, labels, g, 3, 1) - x).max() < 1e-9


def test_transform_points_soft_is_convex_blend():
    rng = np.random.default_rng(8)
    g = random_set(rng, m=2)
    x = rng.normal(size=(10, 3))
    w = assign_soft(x, g, 0)
    blended = transform_points(x, w, g, 0, 2)
    each = [transform_points(x, np.full(10, i), g, 0, 2) for i in range(2)]
    assert np.allclose(blended, w.weights[:, :1] * each[0] + w.weights[:, 1:] * each[1])


def test_fuse_to_step():
    rng = np.random.default_rng(9)
    f = [rng.normal(size=(n, 3)) for n in (5, 7, 9)]
    g1 = GaussianSet.static(np.zeros((1, 3)), 1, 1.0)
    assert np.array_equal(fuse_to_step(f[:1], g1, [np.zeros(5, int)], 0), f[0])
    static = GaussianSet.static(np.zeros((1, 3)), 3, 1.0)
    labels = [np.zeros(len(x), int) for x in f]
    fused = fuse_to_step(f, static, labels, 1)
    assert fused.shape == (21, 3)
    assert np.allclose(fused, np.concatenate(f))
    assert fuse_to_step(f, static, labels, 1, exclude=[1]).shape == (14, 3)


def test_flat_round_trip_and_json(tmp_path):
    g = random_set(np.random.default_rng(10))
    h = GaussianSet.from_flat(g.flat(), g.m, g.num_timesteps)
    assert np.array_equal(h.flat(), g.flat())
    g.save(tmp_path / "model.json")
    assert np.array_equal(GaussianSet.load(tmp_path / "model.json").flat(), g.flat())


def test_invalid_sets_rejected():
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((1, 2, 6)), np.zeros((1, 3, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        GaussianSet(np.full((1, 1, 6), np.nan), np.zeros((1, 1, 3)), np.zeros((1, 3)))
