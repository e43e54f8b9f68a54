import math

import numpy as np
import pytest

from artigauss import dataio, pipeline
from artigauss import kinematics as kin
from artigauss.gaussian_model import GaussianSet, transform_points
from artigauss.geometry import PRISMATIC, REVOLUTE, RigidTransform, ScrewMotion, axis_angle_matrix, matrix_to_rot6d
from artigauss.kinematics import (
    DegenerateMotion,
    EdgeCosts,
    EmptyPart,
    KinematicModel,
    MissingState,
    UnknownLabel,
)

Z = np.array([0.0, 0.0, 1.0])


def set_from_poses(tracks, scale=0.2):
    """GaussianSet whose part i follows the (K, 4, 4) pose track ``tracks[i]``."""
    tracks = np.asarray(tracks, dtype=np.float64)
    rot6d = np.array([[matrix_to_rot6d(T[:3, :3]).as_array() for T in tr] for tr in tracks])
    return GaussianSet(rot6d, tracks[:, :, :3, 3], np.full((len(tracks), 3), math.log(scale)))


def hinge(axis, origin, theta):
    return ScrewMotion(REVOLUTE, axis, origin, (theta,)).transform(theta).as_matrix()


def slide(axis, d):
    return ScrewMotion(PRISMATIC, axis, np.zeros(3), (d,)).transform(d).as_matrix()


def translate(v):
    T = np.eye(4)
    T[:3, 3] = v
    return T


def random_rigid(rng):
    q = rng.normal(size=3)
    return RigidTransform(axis_angle_matrix(q / np.linalg.norm(q), rng.uniform(0.2, 2.5)), rng.normal(size=3)).as_matrix()


# merge


def test_merge_loss_examples():
    K = 5
    base = np.stack([translate([0.1 * k, 0, 0]) for k in range(K)])
    g = set_from_poses([base, base, np.stack([hinge(Z, [1, 0, 0], 0.3 * k) for k in range(K)])])
    assert kin.merge_loss(g, 0, 1) == pytest.approx(0, abs=1e-20)
    assert kin.merge_loss(g, 0, 2) > 1e-2
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = set_from_poses([[random_rigid(rng) for _ in range(4)] for _ in range(2)])
        assert abs(kin.merge_loss(g, 0, 1) - kin.merge_loss(g, 1, 0)) <= 1e-12
    with pytest.raises(ValueError):
        kin.merge_loss(g, 0, 0)


def blob_frames(centers_by_part, tracks, n=40, seed=0):
    rng = np.random.default_rng(seed)
    K = tracks.shape[1]
    frames, labels = [], []
    for k in range(K):
        pts, lab = [], []
        for p, c in enumerate(centers_by_part):
            local = np.asarray(c) + 0.05 * rng.normal(size=(n, 3))
            M = tracks[p, k] @ np.linalg.inv(tracks[p, 0])
            pts.append(local @ M[:3, :3].T + M[:3, 3])
            lab.append(np.full(n, p))
        frames.append(np.concatenate(pts))
        labels.append(np.concatenate(lab))
    return frames, labels


def test_merge_static_parts_collapse():
    K = 4
    still = np.stack([np.eye(4)] * K)
    centers = [[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0]]
    tracks = np.stack([still @ translate(c) for c in centers])
    g = set_from_poses(tracks)
    frames, labels = blob_frames(centers, tracks)
    res = kin.merge_parts(g, frames, labels)
    assert res.num_parts == 1 and res.part_of.tolist() == [0, 0, 0]


def test_merge_independent_movers_stay_apart():
    K = 4
    a = np.stack([hinge(Z, [0, 0, 0], 0.3 * k) for k in range(K)])
    b = np.stack([slide([1, 0, 0], 0.2 * k) for k in range(K)])
    tracks = np.stack([a, b @ translate([0.1, 0, 0])])
    g = set_from_poses(tracks)
    frames, labels = blob_frames([[0, 0, 0], [0.1, 0, 0]], tracks)
    assert kin.merge_parts(g, frames, labels).num_parts == 2


def test_merge_over_segmented_link():
    K = 5
    link = np.stack([hinge(Z, [0, 0, 0], 0.25 * k) for k in range(K)])
    other = np.stack([hinge([0, 1, 0], [1, 0, 0], -0.2 * k) for k in range(K)]) @ link
    centers = [[0.1, 0, 0], [0.3, 0, 0], [0.5, 0, 0], [1.1, 0, 0]]
    tracks = np.stack([link @ translate(c) for c in centers[:3]] + [other @ translate(centers[3])])
    g = set_from_poses(tracks)
    frames, labels = blob_frames(centers, tracks, n=[60, 40, 20, 30][0])
    labels = [np.repeat([0, 1, 2, 3], 60) for _ in range(K)]
    res = kin.merge_parts(g, frames, labels)
    assert res.num_parts == 2
    assert res.members == [[0, 1, 2], [3]]
    assert res.part_of.tolist() == [0, 0, 0, 1]


def test_merge_gate_blocks_distant_pairs():
    K = 3
    still = np.stack([np.eye(4)] * K)
    centers = [[0, 0, 0], [5, 0, 0]]
    tracks = np.stack([still @ translate(c) for c in centers])
    frames, labels = blob_frames(centers, tracks)
    # pad the bounding box so that the two static blobs are far apart relative to it
    res = kin.merge_parts(set_from_poses(tracks), frames, labels, neighbor_factor=0.05)
    assert res.num_parts == 2


def test_merge_drops_gaussians_without_points():
    K = 3
    still = np.stack([np.eye(4)] * K)
    tracks = np.stack([still, still @ translate([3, 0, 0])])
    frames = [np.zeros((5, 3))] * K
    labels = [np.zeros(5, int)] * K
    res = kin.merge_parts(set_from_poses(tracks), frames, labels)
    assert res.part_of.tolist() == [0, -1]


# screw fitting


def rel_seq(kind, axis, origin, states):
    s = ScrewMotion(kind, axis, origin, tuple(states))
    return [s.transform(v).as_matrix() for v in s.states]


def test_fit_screw_revolute():
    th = [0.1, 0.25, -0.3, 0.5, 0.7, 0.2, 0.9]
    fit = kin.fit_screw(rel_seq(REVOLUTE, Z, [1, 2, 0], th))
    assert fit.screw.kind == REVOLUTE
    assert abs(abs(fit.screw.axis @ Z) - 1) < 1e-9
    assert np.allclose(fit.screw.origin[:2], [1, 2], atol=1e-6)
    assert np.allclose(fit.screw.states, th, atol=1e-6)
    assert fit.residual <= 1e-8


def test_fit_screw_prismatic_sign_convention():
    d = [-0.1, -0.2, 0.05, 0.3]
    fit = kin.fit_screw(rel_seq(PRISMATIC, [1, 0, 0], [0, 0, 0], d))
    assert fit.screw.kind == PRISMATIC
    assert np.allclose(np.abs(fit.screw.axis), [1, 0, 0], atol=1e-9)
    assert fit.screw.states[0] > 0
    assert np.allclose(np.abs(fit.screw.states), np.abs(d), atol=1e-9)
    assert fit.residual <= 1e-10


def test_fit_screw_degenerate():
    with pytest.raises(DegenerateMotion):
        kin.fit_screw([np.eye(4)] * 3)


def conjugated_residuals(mats, W):
    fit = kin.fit_screw(mats)
    moved = ScrewMotion(fit.screw.kind, W[:3, :3] @ fit.screw.axis,
                        W[:3, :3] @ fit.screw.origin + W[:3, 3], fit.screw.states)
    return fit.residual, kin.screw_residual(moved, W @ mats @ np.linalg.inv(W))


def test_fit_screw_conjugation_equivariance():
    rng = np.random.default_rng(1)
    for _ in range(5):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        mats = np.array(rel_seq(REVOLUTE, axis, rng.normal(size=3), rng.uniform(-1, 1, 6)))
        a, b = conjugated_residuals(mats, random_rigid(rng))
        assert abs(a - b) <= 1e-9
        # off-screw motions: the Frobenius residual is exactly invariant under rotations about the origin
        noisy = mats @ translate(0.01 * rng.normal(size=3))
        R = random_rigid(rng)
        R[:3, 3] = 0
        a, b = conjugated_residuals(noisy, R)
        assert a > 1e-6 and abs(a - b) <= 1e-9


# edge costs and spanning tree


def test_one_dof_cost_orders_hinge_before_random():
    K = 6
    parent = np.stack([np.eye(4)] * K)
    child = np.stack([hinge(Z, [0.5, 0, 0], 0.2 * k) for k in range(K)]) @ translate([1, 0, 0])
    rng = np.random.default_rng(2)
    wild = np.stack([np.eye(4)] + [random_rigid(rng) for _ in range(K - 1)]) @ translate([0, 1, 0])
    g = set_from_poses([parent, child, wild])
    frames, labels = blob_frames([[0, 0, 0], [1, 0, 0], [0, 1, 0]], np.stack([parent, child, wild]))
    c = kin.edge_costs(g, frames, labels)
    assert c.one_dof[0, 1] <= 1e-9
    assert c.one_dof[0, 2] > 1e3 * max(c.one_dof[0, 1], 1e-9)
    assert np.allclose(c.spatial, c.spatial.T)
    with pytest.raises(EmptyPart):
        kin.edge_costs(g, frames, [np.zeros_like(l) for l in labels])


def test_mst_examples():
    assert kin.build_tree(EdgeCosts(np.zeros((1, 1)), np.zeros((1, 1)))) == []
    spatial = np.array([[0, 0, 1.0], [0, 0, 0], [1.0, 0, 0]])
    assert kin.build_tree(EdgeCosts(spatial, np.zeros((3, 3)))) == [(0, 1), (1, 2)]
    w = np.ones((3, 3))
    assert kin.minimum_spanning_tree(w) == [(0, 1), (0, 2)]


def test_mst_spans_and_is_acyclic():
    rng = np.random.default_rng(3)
    for n in range(2, 8):
        w = rng.random((n, n))
        w = w + w.T
        edges = kin.minimum_spanning_tree(w)
        assert len(edges) == n - 1
        uf = kin._UnionFind(n)
        assert all(uf.union(i, j) for i, j in edges)


# root, orientation, forward kinematics


def chain_set(K=5):
    base = np.stack([np.eye(4)] * K)
    mid = np.stack([hinge(Z, [0.5, 0, 0], 0.2 * k) for k in range(K)])
    tip = mid @ np.stack([hinge([0, 1, 0], [1.5, 0, 0], -0.15 * k) for k in range(K)])
    return set_from_poses([tip @ translate([2, 0, 0]), base, mid @ translate([1, 0, 0])])


def test_root_and_orientation():
    g = chain_set()
    model = kin.select_root_and_orient([(0, 2), (1, 2)], g)
    assert model.root == 1
    assert [(e.parent, e.child) for e in model.edges] == [(1, 2), (2, 0)]
    assert all(e.residual <= 1e-8 for e in model.edges)
    tie = set_from_poses([np.stack([np.eye(4)] * 3)] * 2)
    assert kin.select_root(tie) == 0


def test_forward_kinematics_reproduces_poses():
    g = chain_set()
    model = kin.select_root_and_orient([(0, 2), (1, 2)], g)
    for k in range(g.num_timesteps):
        poses = kin.forward_kinematics(model, k)
        for p in range(3):
            assert np.abs(poses[p] - g.pose(p, k).as_matrix()).max() <= 1e-6
    zero = kin.part_motions(model, np.zeros(2))
    assert np.allclose(zero, np.eye(4))
    with pytest.raises(MissingState):
        kin.part_motions(model, [0.0])
    with pytest.raises(MissingState):
        kin.forward_kinematics(model, 2, np.zeros((2, 2)))


def test_single_hinge_fk_matches_formula():
    K = 3
    g = set_from_poses([np.stack([np.eye(4)] * K),
                        np.stack([hinge(Z, [1, 0, 0], 0.4 * k) for k in range(K)]) @ translate([2, 0, 0])])
    model = kin.select_root_and_orient([(0, 1)], g)
    theta = 1.1
    M = kin.part_motions(model, [theta])[1]
    assert np.allclose(M, hinge(Z, [1, 0, 0], theta), atol=1e-6)


def test_reanimate_identity_and_prismatic():
    g = chain_set()
    model = kin.select_root_and_orient([(0, 2), (1, 2)], g)
    pts = np.random.default_rng(4).normal(size=(30, 3))
    labels = np.arange(30) % 3
    assert np.abs(kin.reanimate(model, [0.0, 0.0], pts, labels) - pts).max() <= 1e-12
    with pytest.raises(UnknownLabel):
        kin.reanimate(model, [0.0, 0.0], pts, np.full(30, 7))
    K = 4
    gp = set_from_poses([np.stack([np.eye(4)] * K), np.stack([slide([0, 0, 1], 0.1 * k) for k in range(K)])])
    mp = kin.select_root_and_orient([(0, 1)], gp)
    out = kin.reanimate(mp, [0.5], pts[:4], [1, 1, 0, 0])
    axis = mp.edges[0].screw.axis
    assert np.allclose(out[:2] - pts[:2], 0.5 * axis)
    assert np.allclose(out[2:], pts[2:4])


def test_model_serialization_round_trip(tmp_path):
    model = kin.select_root_and_orient([(0, 2), (1, 2)], chain_set())
    model.save(tmp_path / "k.json")
    back = KinematicModel.load(tmp_path / "k.json")
    assert back.root == model.root
    assert np.array_equal(back.states(), model.states())
    assert np.array_equal(back.rest_pose, model.rest_pose)
    with pytest.raises(ValueError):
        KinematicModel(model.parts, model.gaussians, model.root, model.edges[:1], model.rest_pose, model.root_track)


# fine-tuning


def hinge_dataset():
    return dataio.generate(dataio.preset("chain2", frames=4, points=512, noise=0.0, seed=0))


def rigid_hinge_frames(ds):
    """Step-0 points carried by the true motions, so the true joints explain every frame exactly."""
    motions = ds.gt.motions()
    lab = ds.gt.labels[0]
    frames = [np.einsum("nij,nj->ni", motions[lab, k, :3, :3], ds.frames[0]) + motions[lab, k, :3, 3]
              for k in range(ds.num_frames)]
    return frames, [lab] * ds.num_frames


def test_finetune_zero_iterations_is_identity():
    ds = hinge_dataset()
    _, model = pipeline.gt_model(ds)
    out, history = kin.finetune_joints(model, ds.frames, ds.gt.labels, iterations=0)
    assert out is model and history == []


def test_finetune_recovers_perturbed_states():
    ds = hinge_dataset()
    frames, labels = rigid_hinge_frames(ds)
    _, model = pipeline.gt_model(ds)
    truth = model.states().copy()
    assert kin.kinematic_score(model, frames, labels) <= 1e-20
    e = model.edges[0]
    bumped = ScrewMotion(e.screw.kind, e.screw.axis, e.screw.origin, tuple(v + 0.1 for v in e.screw.states))
    model.edges[0] = kin.Joint(e.parent, e.child, bumped, e.residual)
    before = kin.kinematic_score(model, frames, labels)
    out, history = kin.finetune_joints(model, frames, labels, iterations=500,
                                       weights=kin.LossWeights(lambda_emd=0.0))
    assert len(history) == 500
    assert np.abs(out.states() - truth).max() <= 0.01
    assert kin.kinematic_score(out, frames, labels) < 0.1 * before


def test_finetune_unknown_labels():
    ds = hinge_dataset()
    _, model = pipeline.gt_model(ds)
    with pytest.raises(UnknownLabel):
        kin.finetune_joints(model, ds.frames, [l + 5 for l in ds.gt.labels], iterations=1)
