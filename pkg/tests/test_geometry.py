import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artigauss.geometry import (
    PRISMATIC,
    REVOLUTE,
    DegenerateRotation,
    RigidTransform,
    Rot6D,
    ScrewMotion,
    axis_angle_matrix,
    compose,
    inverse,
    matrix_to_rot6d,
    relative_motion,
    rot6d_to_matrix,
    rot6d_to_matrix_torch,
    screw_to_transform,
    wrap_angle,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


def close(t1, t2, tol=1e-9):
    return np.allclose(t1.as_matrix(), t2.as_matrix(), atol=tol)


def test_rot6d_examples():
    assert np.allclose(rot6d_to_matrix(Rot6D([1, 0, 0], [0, 1, 0])), np.eye(3))
    assert np.allclose(rot6d_to_matrix(Rot6D([2, 0, 0], [1, 1, 0])), np.eye(3))
    R = rot6d_to_matrix(Rot6D([0, 1, 0], [-1, 0, 0]))
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]])


@pytest.mark.parametrize("a,b", [([0, 0, 0], [0, 1, 0]), ([1e-10, 0, 0], [0, 1, 0]), ([1, 0, 0], [2, 0, 0])])
def test_rot6d_degenerate(a, b):
    with pytest.raises(DegenerateRotation):
        rot6d_to_matrix(Rot6D(a, b))


def test_rot6d_random_inputs_are_rotations():
    rng = np.random.default_rng(0)
    for v in rng.normal(size=(10_000, 6)):
        R = rot6d_to_matrix(v)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
        assert abs(np.linalg.det(R) - 1) < 1e-6


@given(vec3, vec3, st.floats(0.01, 100))
def test_rot6d_scale_invariant_in_a(a, b, lam):
    try:
        R = rot6d_to_matrix(Rot6D(a, b))
    except DegenerateRotation:
        return
    assert np.abs(rot6d_to_matrix(Rot6D(lam * a, b)) - R).max() < 1e-12 * max(1.0, lam)


def test_matrix_to_rot6d_examples_and_round_trip():
    r = matrix_to_rot6d(np.eye(3))
    assert np.allclose(r.a, [1, 0, 0]) and np.allclose(r.b, [0, 1, 0])
    r = matrix_to_rot6d(axis_angle_matrix(np.array([0, 0, 1.0]), math.pi / 2))
    assert np.allclose(r.a, [0, 1, 0]) and np.allclose(r.b, [-1, 0, 0])
    rng = np.random.default_rng(1)
    for _ in range(100):
        R = random_rotation(rng)
        assert np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max() < 1e-9


def test_torch_rot6d_matches_numpy():
    import torch

    v = np.random.default_rng(2).normal(size=(5, 6))
    Rt = rot6d_to_matrix_torch(torch.as_tensor(v)).numpy()
    for i in range(5):
        assert np.allclose(Rt[i], rot6d_to_matrix(v[i]), atol=1e-14)


def test_compose_examples():
    rng = np.random.default_rng(3)
    T = random_transform(rng)
    assert close(compose(RigidTransform(), T), T)
    assert close(compose(T, inverse(T)), RigidTransform())
    z = np.array([0, 0, 1.0])
    R30 = RigidTransform(axis_angle_matrix(z, math.radians(30)))
    R60 = RigidTransform(axis_angle_matrix(z, math.radians(60)))
    assert close(R30 @ R60, RigidTransform(axis_angle_matrix(z, math.pi / 2)))


def test_compose_applies_right_first():
    rng = np.random.default_rng(4)
    t1, t2 = random_transform(rng), random_transform(rng)
    x = rng.normal(size=(10, 3))
    assert np.allclose(compose(t1, t2).apply(x), t1.apply(t2.apply(x)))


def test_compose_associative():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b, c = (random_transform(rng) for _ in range(3))
        assert close((a @ b) @ c, a @ (b @ c))


def test_inverse_examples():
    assert close(inverse(RigidTransform()), RigidTransform())
    d = np.array([1.0, -2.0, 3.0])
    assert close(inverse(RigidTransform(np.eye(3), d)), RigidTransform(np.eye(3), -d))
    rng = np.random.default_rng(6)
    T = random_transform(rng)
    inv = inverse(T)
    assert np.allclose(inv.rotation, T.rotation.T)
    assert np.allclose(inv.translation, -T.rotation.T @ T.translation)


def test_relative_motion():
    rng = np.random.default_rng(7)
    T = random_transform(rng)
    assert close(relative_motion(T, T), RigidTransform())
    assert close(relative_motion(T, RigidTransform()), T)
    d = np.array([0.5, 0.0, -1.0])
    k = 3
    O = relative_motion(RigidTransform(np.eye(3), (k + 1) * d), RigidTransform(np.eye(3), k * d))
    assert close(O, RigidTransform(np.eye(3), d))
    for _ in range(50):
        t1, t2 = random_transform(rng), random_transform(rng)
        x = rng.normal(size=(5, 3))
        assert np.allclose(relative_motion(t2, t1).apply(t1.apply(x)), t2.apply(x))


def test_screw_examples():
    z = np.array([0, 0, 1.0])
    rev = ScrewMotion(REVOLUTE, z, np.array([1.0, 0, 0]), (0.0, math.pi))
    assert close(screw_to_transform(rev, 0), RigidTransform())
    assert np.allclose(screw_to_transform(rev, 1).apply(np.array([[2.0, 0, 0]])), [[0, 0, 0]])
    pri = ScrewMotion(PRISMATIC, z, np.zeros(3), (2.5,))
    assert close(screw_to_transform(pri, 0), RigidTransform(np.eye(3), [0, 0, 2.5]))
    with pytest.raises(IndexError):
        screw_to_transform(pri, 1)


def test_screw_invariants():
    s = ScrewMotion(REVOLUTE, np.array([0, 0, 2.0]), np.zeros(3), (4.0, -4.0, math.pi, -math.pi))
    assert abs(np.linalg.norm(s.axis) - 1) < 1e-12
    assert all(-math.pi < v <= math.pi for v in s.states)
    assert s.states[2] == pytest.approx(math.pi) and s.states[3] == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        ScrewMotion("helical", np.array([0, 0, 1.0]), np.zeros(3), ())
    with pytest.raises(ValueError):
        ScrewMotion(REVOLUTE, np.zeros(3), np.zeros(3), ())


def test_revolute_preserves_distance_to_axis():
    rng = np.random.default_rng(8)
    for _ in range(50):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        origin = rng.normal(size=3)
        theta = rng.uniform(-3, 3)
        T = ScrewMotion(REVOLUTE, axis, origin, (theta,)).transform(theta)
        x = rng.normal(size=(20, 3))

        def dist(p):
            v = p - origin
            return np.linalg.norm(v - np.outer(v @ axis, axis), axis=1)

        assert np.allclose(dist(T.apply(x)), dist(x), atol=1e-9)


def test_wrap_angle():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.25) == 0.25
