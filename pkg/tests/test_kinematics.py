import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from animlift.errors import Diverged, InvalidInput, ShapeMismatch
from animlift.geometry import rodrigues
from animlift.kinematics import (
    IkConfig,
    KinematicChain,
    bone_lengths_over_time,
    forward_kinematics,
    ik_objective,
    refine_inverse_kinematics,
)
from animlift.training import ik_gradient_check


def random_chain(rng, J):
    parent = [-1] + [int(rng.integers(j)) for j in range(1, J)]
    return KinematicChain(tuple(parent), rng.normal(size=(J, 3)))


def fk_reference(chain, theta, root):
    """Joint-by-joint recursion with 4x4 homogeneous transforms."""
    T, J, _ = theta.shape
    out = np.zeros((T, J, 3))
    for t in range(T):
        G = [None] * J
        done = set()
        while len(done) < J:
            for j, p in enumerate(chain.parent):
                if j in done or (p != -1 and p not in done):
                    continue
                local = np.eye(4)
                local[:3, :3] = rodrigues(theta[t, j])
                if p == -1:
                    local[:3, 3] = root[t]
                    G[j] = local
                else:
                    local[:3, 3] = chain.rest_offset[j]
                    G[j] = G[p] @ local
                out[t, j] = G[j][:3, 3]
                done.add(j)
    return out


def test_chain_validation():
    with pytest.raises(InvalidInput):
        KinematicChain((-1, -1), np.ones((2, 3)))
    with pytest.raises(InvalidInput):
        KinematicChain((1, 0), np.ones((2, 3)))  # no root (cycle)
    with pytest.raises(InvalidInput):
        KinematicChain((-1, 2, 1), np.ones((3, 3)))  # cycle below a root
    with pytest.raises(InvalidInput):
        KinematicChain((-1, 0), np.zeros((2, 3)))  # zero-length bone
    with pytest.raises(ShapeMismatch):
        KinematicChain((-1, 0), np.ones((3, 3)))


def test_adjacency_symmetric_and_consistent():
    chain = random_chain(np.random.default_rng(0), 8)
    A = chain.adjacency
    assert np.array_equal(A, A.T) and not A.diagonal().any()
    assert A.sum() == 2 * (chain.num_joints - 1)
    for j, p in enumerate(chain.parent):
        if p >= 0:
            assert A[j, p] == 1


def test_fk_zero_theta_gives_cumulative_offsets():
    chain = KinematicChain((-1, 0, 1, 1), np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3.0]]))
    out = forward_kinematics(chain, np.zeros((1, 4, 3)), np.array([[1.0, 1, 1]]))
    np.testing.assert_allclose(out[0], [[1, 1, 1], [2, 1, 1], [2, 3, 1], [2, 1, 4]])


def test_fk_quarter_turn_at_root():
    chain = KinematicChain((-1, 0), np.array([[0, 0, 0], [1.0, 0, 0]]))
    theta = np.zeros((1, 2, 3))
    theta[0, 0] = [0, 0, np.pi / 2]
    out = forward_kinematics(chain, theta, np.array([[0.5, 0, 0]]))
    np.testing.assert_allclose(out[0, 1], [0.5, 1, 0], atol=1e-15)


def test_fk_matches_homogeneous_recursion():
    rng = np.random.default_rng(1)
    chain = random_chain(rng, 7)
    theta, root = rng.normal(size=(4, 7, 3)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(forward_kinematics(chain, theta, root), fk_reference(chain, theta, root), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_fk_preserves_bone_lengths(seed, J):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng, J)
    out = forward_kinematics(chain, rng.normal(scale=2, size=(20, J, 3)), rng.normal(size=(20, 3)))
    np.testing.assert_allclose(bone_lengths_over_time(chain, out), np.tile(chain.bone_lengths, (20, 1)), atol=1e-9)


def test_fk_global_rotation_equivariance():
    rng = np.random.default_rng(2)
    chain = random_chain(rng, 6)
    theta, root = rng.normal(size=(3, 6, 3)), rng.normal(size=(3, 3))
    Q = Rotation.random(random_state=2)
    rotated = theta.copy()
    r = chain.root
    rotated[:, r] = (Q * Rotation.from_rotvec(theta[:, r])).as_rotvec()
    out = forward_kinematics(chain, theta, root)
    out_r = forward_kinematics(chain, rotated, root @ Q.as_matrix().T)
    np.testing.assert_allclose(out_r, out @ Q.as_matrix().T, atol=1e-9)


def test_fk_shape_errors():
    chain = random_chain(np.random.default_rng(3), 4)
    with pytest.raises(ShapeMismatch):
        forward_kinematics(chain, np.zeros((2, 5, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        forward_kinematics(chain, np.zeros((2, 4, 3)), np.zeros((3, 3)))


# --- objective -------------------------------------------------------------


def test_objective_zero_at_perfect_fit():
    rng = np.random.default_rng(4)
    chain = random_chain(rng, 5)
    theta, root = rng.normal(size=(6, 5, 3)), rng.normal(size=(6, 3))
    target = forward_kinematics(chain, theta, root)
    assert ik_objective(chain, theta, root, target, 0.0) == pytest.approx(0, abs=1e-12)


def test_objective_static_pose_has_no_smoothness_term():
    rng = np.random.default_rng(5)
    chain = random_chain(rng, 5)
    theta = np.repeat(rng.normal(size=(1, 5, 3)), 4, 0)
    root = np.repeat(rng.normal(size=(1, 3)), 4, 0)
    target = rng.normal(size=(4, 5, 3))
    assert ik_objective(chain, theta, root, target, 100.0) == pytest.approx(ik_objective(chain, theta, root, target, 0.0))


def test_objective_hand_computed_single_joint():
    chain = KinematicChain((-1,), np.zeros((1, 3)))
    root = np.array([[0.0, 0, 0], [3.0, 4, 0]])
    target = np.array([[[1.0, 0, 0]], [[3.0, 4, 2]]])
    # fit: 1 + 2; smoothness: |(3,4,0)| = 5
    assert ik_objective(chain, np.zeros((2, 1, 3)), root, target, 0.5) == pytest.approx(3 + 0.5 * 5)


def test_ik_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    chain = random_chain(rng, 6)
    entries = ik_gradient_check(chain, rng.normal(size=(5, 6, 3)), rng.normal(size=(5, 3)), rng.normal(size=(5, 6, 3)),
                                n_coords=20, h=1e-5)
    assert max(e.rel_error for e in entries) < 1e-4


# --- refinement ------------------------------------------------------------


def bone_ramp_toy(T=20, J=6, seed=0):
    """Chain with motion whose first bone grows from 1.0 to 1.1 over the sequence."""
    rng = np.random.default_rng(seed)
    offs = rng.normal(size=(J, 3))
    offs /= np.linalg.norm(offs, axis=1, keepdims=True)
    chain = KinematicChain((-1,) + tuple(range(J - 1)), offs)
    t = np.linspace(0, 1, T)
    theta = 0.6 * np.sin(2 * np.pi * t[:, None, None] + rng.uniform(0, 6, (1, J, 3)))
    root = np.stack([t, 0 * t, 0 * t], 1)
    clean = forward_kinematics(chain, theta, root)
    target = clean.copy()
    ramp = np.linspace(1.0, 1.1, T)
    # stretch bone 1 (and carry its subtree along)
    bone = clean[:, 1] - clean[:, 0]
    target[:, 1:] += ((ramp - 1.0)[:, None] * bone)[:, None, :]
    target += rng.normal(scale=0.05, size=target.shape)
    return chain, target


def test_ik_bone_lengths_fixed_at_first_frame():
    chain, target = bone_ramp_toy()
    res = refine_inverse_kinematics(chain, target, IkConfig(max_iters=300))
    first = np.linalg.norm(target[0] - target[0, list(np.maximum(chain.parent, 0))], axis=1)
    dev = np.abs(bone_lengths_over_time(res.chain, res.joints) - first[None]).max()
    assert dev < 1e-9


def test_ik_reduces_objective_by_half_on_ramp_toy():
    chain, target = bone_ramp_toy()
    res = refine_inverse_kinematics(chain, target, IkConfig(max_iters=1000))
    assert res.final_objective <= 0.5 * res.initial_objective
    assert res.final_objective <= res.initial_objective
    env = np.minimum.accumulate(res.trace)
    assert (np.diff(env) <= 0).all()


def test_ik_recovers_fk_realizable_target():
    rng = np.random.default_rng(7)
    chain = random_chain(rng, 5)
    theta = rng.normal(scale=0.3, size=(6, 5, 3))
    target = forward_kinematics(chain, theta, rng.normal(size=(6, 3)))
    res = refine_inverse_kinematics(chain, target, IkConfig(max_iters=3000, smoothness_weight=0.0, learning_rate=0.002))
    # Adam on the unsquared norms settles within about lr of the optimum
    assert np.abs(res.joints - target).max() < 1e-3


def test_ik_large_smoothness_reduces_jitter():
    rng = np.random.default_rng(8)
    chain = random_chain(rng, 5)
    theta = np.repeat(rng.normal(scale=0.3, size=(1, 5, 3)), 12, 0)
    target = forward_kinematics(chain, theta, np.zeros((12, 3))) + rng.normal(scale=0.1, size=(12, 5, 3))
    res = refine_inverse_kinematics(chain, target, IkConfig(max_iters=400, smoothness_weight=1e3))
    disp = lambda x: np.linalg.norm(np.diff(x, axis=0), axis=-1).mean()
    assert disp(res.joints) < disp(target)


def test_ik_diverges_with_huge_learning_rate():
    chain, target = bone_ramp_toy()
    with pytest.raises(Diverged):
        refine_inverse_kinematics(chain, target, IkConfig(learning_rate=1e4, max_iters=50))


def test_ik_config_validation():
    with pytest.raises(InvalidInput):
        IkConfig(learning_rate=0)
    with pytest.raises(InvalidInput):
        IkConfig(max_iters=0)
    with pytest.raises(InvalidInput):
        IkConfig(adam_betas=(1.0, 0.5))


def test_ik_is_deterministic():
    chain, target = bone_ramp_toy()
    a = refine_inverse_kinematics(chain, target, IkConfig(max_iters=100))
    b = refine_inverse_kinematics(chain, target, IkConfig(max_iters=100))
    assert a.trace == b.trace
    assert np.array_equal(a.joints, b.joints)
