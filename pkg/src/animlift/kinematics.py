"""Forward kinematics over a joint tree and bone-length-preserving IK refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import Diverged, InvalidInput, ShapeMismatch
from .geometry import rodrigues_torch

log = logging.getLogger(__name__)

ROOT = -1


@dataclass(frozen=True)
class KinematicChain:
    """Joint tree with rest offsets expressed in the parent frame.

    ``parent[j]`` is the parent index of joint ``j``, or ``-1`` for the root.
    ``rest_offset[j]`` is the bone vector from the parent to ``j`` when every
    rotation is the identity; the root's entry is ignored.
    """

    parent: tuple[int, ...]
    rest_offset: np.ndarray
    joint_names: tuple[str, ...] = ()
    _levels: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        offs = np.asarray(self.rest_offset, dtype=np.float64)
        object.__setattr__(self, "rest_offset", offs)
        J = len(parent)
        if offs.shape != (J, 3):
            raise ShapeMismatch(f"rest_offset must be ({J}, 3), got {offs.shape}")
        if not self.joint_names:
            object.__setattr__(self, "joint_names", tuple(f"joint_{j}" for j in range(J)))
        elif len(self.joint_names) != J:
            raise ShapeMismatch("joint_names length does not match parent")
        roots = [j for j, p in enumerate(parent) if p == ROOT]
        if len(roots) != 1:
            raise InvalidInput(f"chain must have exactly one root, found {len(roots)}")
        depth = []
        for j in range(J):
            d, k = 0, j
            while parent[k] != ROOT:
                k = parent[k]
                if not 0 <= k < J:
                    raise InvalidInput(f"joint {j} has an invalid ancestor {k}")
                d += 1
                if d > J:
                    raise InvalidInput(f"cycle in parent graph through joint {j}")
            depth.append(d)
        lengths = np.linalg.norm(offs, axis=1)
        for j, p in enumerate(parent):
            if p != ROOT and not lengths[j] > 0:
                raise InvalidInput(f"joint {j} has a zero-length bone")
        levels = []
        for d in range(max(depth) + 1):
            levels.append(np.array([j for j in range(J) if depth[j] == d], dtype=np.int64))
        object.__setattr__(self, "_levels", tuple(levels))

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return self.parent.index(ROOT)

    @property
    def levels(self) -> tuple:
        """Joint indices grouped by tree depth, root level first."""
        return self._levels

    @property
    def bone_lengths(self) -> np.ndarray:
        lengths = np.linalg.norm(self.rest_offset, axis=1)
        lengths[self.root] = 0.0
        return lengths

    @property
    def adjacency(self) -> np.ndarray:
        J = self.num_joints
        A = np.zeros((J, J), dtype=np.int64)
        for j, p in enumerate(self.parent):
            if p != ROOT:
                A[j, p] = A[p, j] = 1
        return A

    def with_offsets(self, rest_offset) -> "KinematicChain":
        return KinematicChain(self.parent, rest_offset, self.joint_names)

    @classmethod
    def from_positions(cls, parent, positions, joint_names=()) -> "KinematicChain":
        """Chain whose rest pose reproduces ``positions`` (``J x 3``) at zero rotation."""
        positions = np.asarray(positions, dtype=np.float64)
        offs = np.zeros_like(positions)
        for j, p in enumerate(parent):
            if p != ROOT:
                offs[j] = positions[j] - positions[p]
        return cls(tuple(parent), offs, tuple(joint_names))


def bone_lengths_over_time(chain: KinematicChain, joints) -> np.ndarray:
    """Per-frame bone lengths ``T x J`` (root column is zero)."""
    joints = np.asarray(joints, dtype=np.float64)
    parent = np.array(chain.parent)
    par = np.where(parent < 0, chain.root, parent)
    return np.linalg.norm(joints - joints[:, par], axis=-1)


def forward_kinematics_torch(chain: KinematicChain, theta: torch.Tensor, root_position: torch.Tensor,
                             return_rotations: bool = False):
    """Differentiable FK: ``theta`` ``(T, J, 3)``, ``root_position`` ``(T, 3)`` -> ``(T, J, 3)``.

    Joints are processed one tree level at a time so the Python loop runs
    over depth rather than over joints.
    """
    J = chain.num_joints
    if theta.ndim != 3 or theta.shape[1:] != (J, 3):
        raise ShapeMismatch(f"theta must be (T, {J}, 3), got {tuple(theta.shape)}")
    T = theta.shape[0]
    if root_position.shape != (T, 3):
        raise ShapeMismatch(f"root_position must be ({T}, 3), got {tuple(root_position.shape)}")

    local = rodrigues_torch(theta)
    offsets = torch.as_tensor(chain.rest_offset, dtype=theta.dtype, device=theta.device)
    slot = np.empty(J, dtype=np.int64)
    parent = np.asarray(chain.parent)

    levels = chain.levels
    root = levels[0]
    positions = root_position[:, None, :]
    rotations = local[:, root]
    slot[root] = np.arange(len(root))
    filled = len(root)
    for idx in levels[1:]:
        pslot = torch.as_tensor(slot[parent[idx]])
        p_rot = rotations[:, pslot]
        p_pos = positions[:, pslot]
        new_pos = p_pos + torch.einsum("tjab,jb->tja", p_rot, offsets[idx])
        new_rot = p_rot @ local[:, idx]
        positions = torch.cat([positions, new_pos], 1)
        rotations = torch.cat([rotations, new_rot], 1)
        slot[idx] = filled + np.arange(len(idx))
        filled += len(idx)
    order = torch.as_tensor(slot)
    out = positions[:, order]
    if return_rotations:
        return out, rotations[:, order]
    return out


def forward_kinematics(chain: KinematicChain, theta, root_position, return_rotations: bool = False):
    """NumPy front end for :func:`forward_kinematics_torch` (float64)."""
    th = torch.as_tensor(np.asarray(theta, dtype=np.float64))
    rp = torch.as_tensor(np.asarray(root_position, dtype=np.float64))
    with torch.no_grad():
        res = forward_kinematics_torch(chain, th, rp, return_rotations)
    if return_rotations:
        return res[0].numpy(), res[1].numpy()
    return res.numpy()


def safe_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient at the origin is the zero subgradient."""
    sq = (x * x).sum(dim)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def ik_objective_torch(chain, theta, root_position, target, smoothness_weight):
    pred = forward_kinematics_torch(chain, theta, root_position)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"target shape {tuple(target.shape)} != FK output {tuple(pred.shape)}")
    fit = safe_norm(pred - target).sum()
    if pred.shape[0] > 1 and smoothness_weight:
        smooth = safe_norm(pred[1:] - pred[:-1]).sum()
        return fit + smoothness_weight * smooth
    return fit


def ik_objective(chain, theta, root_position, target, smoothness_weight: float = 0.1) -> float:
    """Summed joint distance to ``target`` plus weighted summed frame-to-frame motion."""
    to = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))
    with torch.no_grad():
        return float(ik_objective_torch(chain, to(theta), to(root_position), to(target), smoothness_weight))


@dataclass
class IkConfig:
    smoothness_weight: float = 0.1
    learning_rate: float = 0.01
    max_iters: int = 2000
    convergence_tol: float = 1e-7
    convergence_window: int = 50
    adam_betas: tuple[float, float] = (0.9, 0.999)
    root_translation_free: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be positive")
        if self.max_iters < 1:
            raise InvalidInput("max_iters must be >= 1")
        if self.smoothness_weight < 0:
            raise InvalidInput("smoothness_weight must be non-negative")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise InvalidInput("adam_betas must lie in (0, 1)")


@dataclass
class IkResult:
    chain: KinematicChain
    theta: np.ndarray
    root_position: np.ndarray
    joints: np.ndarray
    trace: list[float]

    @property
    def initial_objective(self) -> float:
        return self.trace[0]

    @property
    def final_objective(self) -> float:
        return min(self.trace)


def refine_inverse_kinematics(chain: KinematicChain, target, config: IkConfig | None = None) -> IkResult:
    """Fit FK pose angles to noisy joint trajectories with Adam.

    Bone vectors are taken from the first frame of ``target`` (in the frame of
    the topology in ``chain``), so every refined frame has exactly the
    first-frame bone lengths. Rotations start at zero and the root translation
    starts on the target root path. The parameters with the lowest objective
    seen are returned.

    Raises:
        Diverged: objective exceeded ten times its initial value.
    """
    config = config or IkConfig()
    target = np.asarray(target, dtype=np.float64)
    J = chain.num_joints
    if target.ndim != 3 or target.shape[1:] != (J, 3):
        raise ShapeMismatch(f"target must be (T, {J}, 3), got {target.shape}")
    fitted = KinematicChain.from_positions(chain.parent, target[0], chain.joint_names)
    T = target.shape[0]

    tgt = torch.as_tensor(target)
    theta = torch.zeros(T, J, 3, dtype=torch.float64, requires_grad=True)
    root = tgt[:, fitted.root].clone().requires_grad_(config.root_translation_free)
    params = [theta, root] if config.root_translation_free else [theta]
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=tuple(config.adam_betas))

    lam = config.smoothness_weight
    trace: list[float] = []
    best = None
    best_val = np.inf
    initial = None
    for it in range(config.max_iters + 1):
        opt.zero_grad()
        obj = ik_objective_torch(fitted, theta, root, tgt, lam)
        val = obj.item()
        trace.append(val)
        if initial is None:
            initial = val
        if not np.isfinite(val) or val > 10.0 * max(initial, 1e-300):
            raise Diverged(f"IK objective {val:.6g} exceeded 10x initial {initial:.6g} at iteration {it}")
        if val < best_val:
            best_val = val
            best = (theta.detach().clone(), root.detach().clone())
        if it == config.max_iters:
            break
        w = config.convergence_window
        if it >= w:
            past = min(trace[: it - w + 1])
            if past - best_val < config.convergence_tol * max(abs(past), 1e-300):
                log.debug("IK converged after %d iterations", it)
                break
        obj.backward()
        opt.step()

    theta_best, root_best = best
    with torch.no_grad():
        joints = forward_kinematics_torch(fitted, theta_best, root_best)
    return IkResult(fitted, theta_best.numpy(), root_best.numpy(), joints.numpy(), trace)
