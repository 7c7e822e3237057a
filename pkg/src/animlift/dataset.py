"""Synthetic 4D skeleton corpus.

Pipeline per sequence: procedural rig + sum-of-sinusoids animation, virtual
marker vertices around each joint, marker means as noisy joints, IK refinement
to restore constant bone lengths, a randomly yawed camera, projection, 2D
noise and normalization to [-1, 1].
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateExtent,
    EmptyDataset,
    FormatError,
    IndexOutOfRange,
    InvalidInput,
    InvalidTemplate,
    LiftError,
    ShapeMismatch,
)
from .geometry import Camera, place_camera, project_perspective, rodrigues
from .kinematics import IkConfig, KinematicChain, forward_kinematics, refine_inverse_kinematics

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MIN_JOINTS, MAX_JOINTS = 19, 29


def derive_seed(root: int, *names) -> int:
    """Deterministic child seed for a named sub-stream of ``root``."""
    keys = [int(root) & 0xFFFFFFFF]
    for n in names:
        keys.append(zlib.crc32(str(n).encode()) if not isinstance(n, int) else n & 0xFFFFFFFF)
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Data containers


@dataclass(frozen=True)
class VertexTrajectories:
    vertices: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeMismatch(f"vertices must be (T, K, 3) with T, K >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise InvalidInput("vertices must be finite")
        object.__setattr__(self, "vertices", v)


@dataclass(frozen=True)
class VirtualMarkerMap:
    marker_indices: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        idx = tuple(tuple(int(i) for i in m) for m in self.marker_indices)
        if any(len(m) == 0 for m in idx):
            raise InvalidInput("every joint needs at least one marker")
        object.__setattr__(self, "marker_indices", idx)


@dataclass
class SkeletonSequence3D:
    joints: np.ndarray
    chain: KinematicChain
    category: str
    sequence_id: str
    fps: float = 30.0

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        if self.joints.ndim != 3 or self.joints.shape[1:] != (self.chain.num_joints, 3):
            raise ShapeMismatch(f"joints {self.joints.shape} do not match a {self.chain.num_joints}-joint chain")
        if not self.category:
            raise InvalidInput("category must be non-empty")

    @property
    def num_frames(self) -> int:
        return self.joints.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[1]


@dataclass
class KeypointSequence2D:
    keypoints: np.ndarray
    presence: np.ndarray
    camera: Camera | None = None
    noise_sigma_px: float = 0.0

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.presence = np.asarray(self.presence).astype(np.int8)
        if self.keypoints.ndim != 3 or self.keypoints.shape[2] != 2:
            raise ShapeMismatch(f"keypoints must be (T, J, 2), got {self.keypoints.shape}")
        if self.presence.shape != self.keypoints.shape[:2]:
            raise ShapeMismatch("presence must be (T, J)")


@dataclass(frozen=True)
class NormalizationRecord:
    """Affine maps used to normalize one sequence; ``x_norm = (x - center) / scale``."""

    center_2d: np.ndarray
    scale_2d: float
    center_3d: np.ndarray
    scale_3d: float
    world_to_mm: float = 1000.0

    def denormalize_2d(self, kp) -> np.ndarray:
        return np.asarray(kp) * self.scale_2d + self.center_2d

    def denormalize_3d(self, y) -> np.ndarray:
        """Normalized 3D back to millimeters."""
        return np.asarray(y) * self.scale_3d + self.center_3d

    def normalize_3d(self, joints_mm) -> np.ndarray:
        return (np.asarray(joints_mm) - self.center_3d) / self.scale_3d

    def normalize_2d(self, kp) -> np.ndarray:
        return (np.asarray(kp) - self.center_2d) / self.scale_2d

    def to_dict(self) -> dict:
        return {
            "center_2d": self.center_2d.tolist(),
            "scale_2d": float(self.scale_2d),
            "center_3d": self.center_3d.tolist(),
            "scale_3d": float(self.scale_3d),
            "world_to_mm": float(self.world_to_mm),
        }

    @classmethod
    def from_dict(cls, d) -> "NormalizationRecord":
        return cls(
            np.asarray(d["center_2d"], dtype=np.float64),
            float(d["scale_2d"]),
            np.asarray(d["center_3d"], dtype=np.float64),
            float(d["scale_3d"]),
            float(d["world_to_mm"]),
        )


# ---------------------------------------------------------------------------
# Joints from virtual markers


def compute_joints_from_markers(v: VertexTrajectories, marker_map: VirtualMarkerMap) -> np.ndarray:
    """Each joint is the mean of its marker vertices, frame by frame."""
    K = v.vertices.shape[1]
    out = np.empty((v.vertices.shape[0], len(marker_map.marker_indices), 3))
    for j, idx in enumerate(marker_map.marker_indices):
        if min(idx) < 0 or max(idx) >= K:
            raise IndexOutOfRange(f"joint {j} references vertex outside [0, {K})")
        out[:, j] = v.vertices[:, list(idx)].mean(1)
    return out


def attach_satellite_markers(joints, rotations, radius: float, rng: np.random.Generator,
                             per_joint: int = 3) -> tuple[VertexTrajectories, VirtualMarkerMap]:
    """Scatter ``per_joint`` marker vertices around each joint.

    Each marker has a fixed offset in its joint's local frame (norm <= radius/2)
    plus per-frame jitter (norm <= radius/2), so every marker mean lies within
    ``radius`` of the joint it stands for.
    """
    joints = np.asarray(joints)
    T, J, _ = joints.shape

    def ball(shape):
        d = rng.normal(size=shape + (3,))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        r = rng.uniform(size=shape) ** (1.0 / 3.0)
        return d * r[..., None] * (radius / 2.0)

    local = ball((J, per_joint))
    jitter = ball((T, J, per_joint))
    world = np.einsum("tjab,jmb->tjma", rotations, local)
    verts = joints[:, :, None, :] + world + jitter
    marker_map = VirtualMarkerMap(tuple(tuple(range(j * per_joint, (j + 1) * per_joint)) for j in range(J)))
    return VertexTrajectories(verts.reshape(T, J * per_joint, 3)), marker_map


# ---------------------------------------------------------------------------
# Procedural rigs


@dataclass(frozen=True)
class Limb:
    name: str
    parent: str | None
    attach: int
    directions: tuple
    count: int
    length: float
    motion: float


_TOPOLOGIES: dict[str, tuple[tuple[Limb, ...], tuple[str, ...]]] = {
    "quadruped": (
        (
            Limb("spine", None, 0, ((1, 0.1, 0),), 2, 0.18, 0.1),
            Limb("neck", "spine", -1, ((0.6, 0.8, 0), (1, 0.1, 0)), 2, 0.14, 0.25),
            Limb("front_left", "spine", -1, ((0, -0.3, 0.5), (0, -1, 0.05)), 3, 0.15, 0.45),
            Limb("front_right", "spine", -1, ((0, -0.3, -0.5), (0, -1, -0.05)), 3, 0.15, 0.45),
            Limb("hind_left", None, 0, ((0, -0.3, 0.5), (0.1, -1, 0.05)), 3, 0.16, 0.45),
            Limb("hind_right", None, 0, ((0, -0.3, -0.5), (0.1, -1, -0.05)), 3, 0.16, 0.45),
            Limb("tail", None, 0, ((-1, 0.3, 0),), 2, 0.09, 0.35),
        ),
        ("tail", "spine", "neck"),
    ),
    "biped": (
        (
            Limb("spine", None, 0, ((0, 1, 0),), 3, 0.14, 0.1),
            Limb("neck", "spine", -1, ((0, 1, 0), (0.2, 1, 0)), 2, 0.1, 0.2),
            Limb("arm_left", "spine", -1, ((0, 0, 1), (0, -1, 0.1)), 3, 0.14, 0.5),
            Limb("arm_right", "spine", -1, ((0, 0, -1), (0, -1, -0.1)), 3, 0.14, 0.5),
            Limb("leg_left", None, 0, ((0, -0.2, 1), (0, -1, 0), (1, -0.2, 0)), 3, 0.2, 0.45),
            Limb("leg_right", None, 0, ((0, -0.2, -1), (0, -1, 0), (1, -0.2, 0)), 3, 0.2, 0.45),
            Limb("tail", None, 0, ((-1, -0.2, 0),), 1, 0.1, 0.3),
        ),
        ("tail", "spine", "neck"),
    ),
    "bird": (
        (
            Limb("spine", None, 0, ((1, 0.3, 0),), 1, 0.1, 0.1),
            Limb("neck", "spine", -1, ((0.3, 1, 0), (0.3, 1, 0), (0.5, 1, 0), (1, 0, 0), (1, -0.2, 0)), 5, 0.06, 0.3),
            Limb("wing_left", "spine", -1, ((0, 0.1, 1),), 3, 0.12, 0.6),
            Limb("wing_right", "spine", -1, ((0, 0.1, -1),), 3, 0.12, 0.6),
            Limb("leg_left", None, 0, ((0, -1, 0.3), (0.2, -1, 0)), 2, 0.09, 0.4),
            Limb("leg_right", None, 0, ((0, -1, -0.3), (0.2, -1, 0)), 2, 0.09, 0.4),
            Limb("tail", None, 0, ((-1, 0.1, 0),), 2, 0.06, 0.3),
        ),
        ("neck", "tail", "spine"),
    ),
    "lizard": (
        (
            Limb("spine", None, 0, ((1, 0, 0),), 2, 0.12, 0.15),
            Limb("neck", "spine", -1, ((1, 0.1, 0),), 1, 0.1, 0.2),
            Limb("front_left", "spine", -1, ((0, 0, 1), (0, -1, 0.3), (0.5, -0.5, 0)), 3, 0.07, 0.5),
            Limb("front_right", "spine", -1, ((0, 0, -1), (0, -1, -0.3), (0.5, -0.5, 0)), 3, 0.07, 0.5),
            Limb("hind_left", None, 0, ((0, 0, 1), (0, -1, 0.3), (0.5, -0.5, 0)), 3, 0.08, 0.5),
            Limb("hind_right", None, 0, ((0, 0, -1), (0, -1, -0.3), (0.5, -0.5, 0)), 3, 0.08, 0.5),
            Limb("tail", None, 0, ((-1, 0, 0),), 3, 0.1, 0.4),
        ),
        ("tail", "spine", "tail", "neck"),
    ),
}

TOPOLOGIES = tuple(_TOPOLOGIES)


@dataclass(frozen=True)
class RigTemplate:
    """A category's rig: topology name, joint count and overall size in meters."""

    category: str
    topology: str = "quadruped"
    num_joints: int = 21
    size: float = 1.0
    rig_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RigTemplate":
        unknown = set(d) - {"category", "topology", "num_joints", "size", "rig_seed"}
        if unknown:
            raise InvalidTemplate(f"unknown template keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {"category": self.category, "topology": self.topology, "num_joints": self.num_joints,
                "size": self.size, "rig_seed": self.rig_seed}


DEFAULT_TEMPLATES = (
    RigTemplate("dog", "quadruped", 21, 0.9, 11),
    RigTemplate("kangaroo", "biped", 23, 1.2, 12),
    RigTemplate("chicken", "bird", 19, 0.5, 13),
    RigTemplate("gecko", "lizard", 27, 0.4, 14),
)


def _build_chain(template: RigTemplate, rng: np.random.Generator):
    if template.topology not in _TOPOLOGIES:
        raise InvalidTemplate(f"unknown topology {template.topology!r}; expected one of {TOPOLOGIES}")
    if not MIN_JOINTS <= template.num_joints <= MAX_JOINTS:
        raise InvalidTemplate(f"num_joints must be in [{MIN_JOINTS}, {MAX_JOINTS}], got {template.num_joints}")
    if not template.size > 0:
        raise InvalidTemplate("size must be positive")
    limbs, growable = _TOPOLOGIES[template.topology]
    counts = {l.name: l.count for l in limbs}
    extra = template.num_joints - 1 - sum(counts.values())
    for i in range(extra):
        counts[growable[i % len(growable)]] += 1

    parent = [-1]
    names = ["root"]
    offsets = [np.zeros(3)]
    motion = [0.05]
    limb_joints: dict[str, list[int]] = {}
    for limb in limbs:
        attach_to = 0 if limb.parent is None else limb_joints[limb.parent][limb.attach]
        ids = []
        for s in range(counts[limb.name]):
            d = np.asarray(limb.directions[min(s, len(limb.directions) - 1)], dtype=np.float64)
            d = d / np.linalg.norm(d) + rng.normal(scale=0.08, size=3)
            d /= np.linalg.norm(d)
            length = limb.length * template.size * rng.uniform(0.85, 1.15)
            parent.append(ids[-1] if ids else attach_to)
            names.append(f"{limb.name}_{s}")
            offsets.append(d * length)
            motion.append(limb.motion)
            ids.append(len(parent) - 1)
        limb_joints[limb.name] = ids
    chain = KinematicChain(tuple(parent), np.array(offsets), tuple(names))
    return chain, np.array(motion)


def synthesize_rig(template: RigTemplate, seed: int, num_frames: int = 48, fps: float = 30.0,
                   amplitude: float = 1.0, harmonics: int = 2):
    """Procedural rig plus a smooth animation.

    The rig geometry depends only on ``template`` (its ``rig_seed``); the
    motion depends on ``seed``. Joint angles are per-axis sums of
    ``harmonics`` sinusoids around a shared gait frequency, and the root walks
    along a random heading. ``amplitude`` scales all motion; 0 gives a static
    sequence.

    Returns:
        ``(chain, theta (T, J, 3), root_path (T, 3))``
    """
    if num_frames < 1:
        raise InvalidInput("num_frames must be >= 1")
    chain, motion = _build_chain(template, np.random.default_rng(derive_seed(template.rig_seed, "rig", template.category)))
    rng = np.random.default_rng(derive_seed(seed, "motion", template.category))
    J = chain.num_joints
    t = np.arange(num_frames) / fps

    base_freq = rng.uniform(0.8, 2.0)
    theta = np.zeros((num_frames, J, 3))
    for k in range(1, harmonics + 1):
        amp = motion[None, :, None] * rng.uniform(0.3, 1.0, size=(1, J, 3)) / k
        phase = rng.uniform(0, 2 * np.pi, size=(1, J, 3))
        theta += amp * np.sin(2 * np.pi * k * base_freq * t[:, None, None] + phase)
    theta *= amplitude

    heading = rng.uniform(0, 2 * np.pi)
    theta[:, chain.root, 1] += heading
    speed = rng.uniform(0.1, 0.5) * template.size * amplitude
    direction = rodrigues(np.array([0.0, heading, 0.0])) @ np.array([1.0, 0.0, 0.0])
    bob = 0.03 * template.size * amplitude * np.sin(2 * np.pi * 2 * base_freq * t)
    root = speed * t[:, None] * direction[None, :]
    root[:, 1] += bob + 0.5 * template.size
    return chain, theta, root


# ---------------------------------------------------------------------------
# 2D corruption and normalization


def add_keypoint_noise(kp, mean_error_px: float, seed: int) -> np.ndarray:
    """Isotropic Gaussian pixel noise whose expected displacement norm is ``mean_error_px``."""
    kp = np.asarray(kp, dtype=np.float64)
    if mean_error_px < 0:
        raise InvalidInput("mean_error_px must be non-negative")
    if mean_error_px == 0:
        return kp.copy()
    sigma = mean_error_px / math.sqrt(math.pi / 2.0)
    return kp + np.random.default_rng(seed).normal(scale=sigma, size=kp.shape)


def noise_sigma(mean_error_px: float) -> float:
    return mean_error_px / math.sqrt(math.pi / 2.0)


def normalize_sequence(kp2d, gt3d, presence=None, world_to_mm: float = 1000.0):
    """Center and scale 2D keypoints and 3D labels into [-1, 1].

    2D uses the centroid and max-abs extent of present keypoints; 3D is first
    converted to millimeters. Absent keypoints are set to the pad value 0.

    Returns:
        ``(normalized 2D (T, J, 2), normalized 3D (T, J, 3), NormalizationRecord)``
    """
    kp2d = np.asarray(kp2d, dtype=np.float64)
    gt3d = np.asarray(gt3d, dtype=np.float64)
    if kp2d.shape[:2] != gt3d.shape[:2]:
        raise ShapeMismatch(f"2D {kp2d.shape} and 3D {gt3d.shape} disagree on (T, J)")
    present = np.ones(kp2d.shape[:2], bool) if presence is None else np.asarray(presence).astype(bool)
    if not present.any():
        raise DegenerateExtent("no present keypoints")

    pts = kp2d[present]
    c2 = pts.mean(0)
    s2 = float(np.abs(pts - c2).max())
    mm = gt3d * world_to_mm
    c3 = mm.reshape(-1, 3).mean(0)
    s3 = float(np.abs(mm - c3).max())
    if not (s2 > 0 and s3 > 0):
        raise DegenerateExtent(f"zero extent (2D {s2}, 3D {s3})")
    record = NormalizationRecord(c2, s2, c3, s3, float(world_to_mm))
    x = np.where(present[..., None], record.normalize_2d(kp2d), 0.0)
    return x, record.normalize_3d(mm), record


def mask_random_joints(kp: KeypointSequence2D, fraction: float, seed: int) -> KeypointSequence2D:
    """Hide ``floor(fraction * J)`` randomly chosen joints in every frame."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInput(f"fraction must lie in [0, 1], got {fraction}")
    T, J = kp.presence.shape
    n = int(math.floor(fraction * J + 1e-12))
    presence = kp.presence.copy()
    keypoints = kp.keypoints.copy()
    if n:
        rng = np.random.default_rng(seed)
        hidden = np.argsort(rng.random((T, J)), axis=1)[:, :n]
        rows = np.repeat(np.arange(T), n)
        presence[rows, hidden.ravel()] = 0
        keypoints[presence == 0] = 0.0
    return KeypointSequence2D(keypoints, presence, kp.camera, kp.noise_sigma_px)


# ---------------------------------------------------------------------------
# Splits


@dataclass
class SplitManifest:
    train_sequence_ids: dict[str, list[str]]
    test_sequence_ids: dict[str, list[str]]
    seed: int

    @property
    def train_ids(self) -> list[str]:
        return [i for ids in self.train_sequence_ids.values() for i in ids]

    @property
    def test_ids(self) -> list[str]:
        return [i for ids in self.test_sequence_ids.values() for i in ids]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "train": self.train_sequence_ids, "test": self.test_sequence_ids}

    @classmethod
    def from_dict(cls, d) -> "SplitManifest":
        return cls({k: list(v) for k, v in d["train"].items()}, {k: list(v) for k, v in d["test"].items()}, int(d["seed"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _id_and_category(item):
    if isinstance(item, tuple):
        return str(item[0]), str(item[1])
    for obj in (item, getattr(item, "skeleton", None)):
        if obj is not None and hasattr(obj, "sequence_id"):
            return obj.sequence_id, obj.category
    raise InvalidInput(f"cannot read sequence id / category from {item!r}")


def split_dataset(sequences, train_fraction: float = 0.8, seed: int = 0) -> SplitManifest:
    """Per-category random split; a category with one sequence goes to train."""
    by_cat: dict[str, list[str]] = {}
    for item in sequences:
        sid, cat = _id_and_category(item)
        by_cat.setdefault(cat, []).append(sid)
    if not by_cat:
        raise EmptyDataset("no sequences to split")
    train, test = {}, {}
    for cat in sorted(by_cat):
        ids = sorted(by_cat[cat])
        rng = np.random.default_rng(derive_seed(seed, "split", cat))
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_train = len(ids) if len(ids) < 2 else int(math.floor(train_fraction * len(ids) + 0.5))
        train[cat] = sorted(ids[:n_train])
        test[cat] = sorted(ids[n_train:])
    return SplitManifest(train, test, int(seed))


# ---------------------------------------------------------------------------
# Sequence files


@dataclass
class SequenceRecord:
    """Everything stored in one sequence file.

    ``skeleton.joints`` is in millimeters; ``keypoints.keypoints`` is
    normalized with ``normalization``.
    """

    skeleton: SkeletonSequence3D
    keypoints: KeypointSequence2D
    normalization: NormalizationRecord

    @property
    def sequence_id(self) -> str:
        return self.skeleton.sequence_id

    @property
    def category(self) -> str:
        return self.skeleton.category

    @property
    def num_joints(self) -> int:
        return self.skeleton.num_joints

    @property
    def target_normalized(self) -> np.ndarray:
        return self.normalization.normalize_3d(self.skeleton.joints)

    def exact_keypoints(self) -> np.ndarray:
        """Noise-free normalized projections of the stored 3D joints."""
        world = self.skeleton.joints / self.normalization.world_to_mm
        return self.normalization.normalize_2d(project_perspective(world, self.keypoints.camera))

    def to_dict(self) -> dict:
        sk, kp = self.skeleton, self.keypoints
        return {
            "format_version": FORMAT_VERSION,
            "category": sk.category,
            "sequence_id": sk.sequence_id,
            "fps": float(sk.fps),
            "num_frames": sk.num_frames,
            "num_joints": sk.num_joints,
            "joint_names": list(sk.chain.joint_names),
            "parent": list(sk.chain.parent),
            "adjacency": sk.chain.adjacency.ravel().tolist(),
            "world_to_mm": float(self.normalization.world_to_mm),
            "joints_3d": sk.joints.ravel().tolist(),
            "keypoints_2d": kp.keypoints.ravel().tolist(),
            "presence": kp.presence.astype(int).ravel().tolist(),
            "camera": kp.camera.to_dict() if kp.camera is not None else None,
            "noise_sigma_px": float(kp.noise_sigma_px),
            "normalization": self.normalization.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, source: str = "<dict>") -> "SequenceRecord":
        try:
            if d["format_version"] != FORMAT_VERSION:
                raise FormatError(f"{source}: unsupported format_version {d['format_version']}")
            T, J = int(d["num_frames"]), int(d["num_joints"])
            joints = np.asarray(d["joints_3d"], dtype=np.float64).reshape(T, J, 3)
            kp = np.asarray(d["keypoints_2d"], dtype=np.float64).reshape(T, J, 2)
            presence = np.asarray(d["presence"], dtype=np.int8).reshape(T, J)
            adjacency = np.asarray(d["adjacency"], dtype=np.int64).reshape(J, J)
            parent = tuple(int(p) for p in d["parent"])
            chain = KinematicChain.from_positions(parent, joints[0], tuple(d["joint_names"]))
            if not np.array_equal(adjacency, chain.adjacency):
                raise FormatError(f"{source}: field 'adjacency' is inconsistent with 'parent'")
            camera = Camera.from_dict(d["camera"]) if d.get("camera") else None
            skeleton = SkeletonSequence3D(joints, chain, d["category"], d["sequence_id"], float(d["fps"]))
            keypoints = KeypointSequence2D(kp, presence, camera, float(d["noise_sigma_px"]))
            norm = NormalizationRecord.from_dict(d["normalization"])
        except KeyError as e:
            raise FormatError(f"{source}: missing field {e.args[0]!r}") from None
        except ValueError as e:
            raise FormatError(f"{source}: {e}") from None
        except LiftError as e:
            if isinstance(e, FormatError):
                raise
            raise FormatError(f"{source}: {e}") from None
        return cls(skeleton, keypoints, norm)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "SequenceRecord":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
        return cls.from_dict(d, str(path))


# ---------------------------------------------------------------------------
# Generation


@dataclass
class GenerationConfig:
    templates: tuple = DEFAULT_TEMPLATES
    sequences_per_category: int = 10
    frames: int = 48
    fps: float = 30.0
    noise_px: float = 3.0
    image_size: tuple[int, int] = (512, 512)
    margin: float = 0.05
    marker_radius: float = 0.02
    amplitude: float = 1.0
    world_to_mm: float = 1000.0
    train_fraction: float = 0.8
    seed: int = 0
    ik: IkConfig = field(default_factory=lambda: IkConfig(max_iters=500, learning_rate=0.01))


def generate_sequence(template: RigTemplate, index: int, config: GenerationConfig) -> SequenceRecord:
    """Run the full synthesis pipeline for one sequence of one category."""
    seq_id = f"{template.category}_{index:03d}"
    seed = derive_seed(config.seed, "dataset", template.category, index)
    try:
        chain, theta, root = synthesize_rig(template, seed, config.frames, config.fps, config.amplitude)
        joints, rotations = forward_kinematics(chain, theta, root, return_rotations=True)
        rng = np.random.default_rng(derive_seed(seed, "markers"))
        verts, markers = attach_satellite_markers(joints, rotations, config.marker_radius * template.size, rng)
        marker_joints = compute_joints_from_markers(verts, markers)
        ik = refine_inverse_kinematics(chain, marker_joints, config.ik)
        refined = ik.joints

        yaw = np.random.default_rng(derive_seed(seed, "camera")).uniform(0, 2 * np.pi)
        camera = place_camera(refined, config.image_size, config.margin, yaw)
        pixels = project_perspective(refined, camera)
        noisy = add_keypoint_noise(pixels, config.noise_px, derive_seed(seed, "noise"))
        x, _, record = normalize_sequence(noisy, refined, world_to_mm=config.world_to_mm)
    except LiftError as e:
        e.args = (f"sequence {seq_id}: {e}",)
        raise

    mm = refined * config.world_to_mm
    fitted = KinematicChain.from_positions(chain.parent, mm[0], chain.joint_names)
    skeleton = SkeletonSequence3D(mm, fitted, template.category, seq_id, config.fps)
    keypoints = KeypointSequence2D(x, np.ones(x.shape[:2], np.int8), camera, noise_sigma(config.noise_px))
    return SequenceRecord(skeleton, keypoints, record)


def toy_record(num_joints: int = 5, frames: int = 8, seed: int = 0, category: str = "toy",
               noise_px: float = 0.0, image_size=(512, 512)) -> SequenceRecord:
    """Small random chain with sinusoidal motion, bypassing markers and IK.

    Used for overfitting checks and tests where a full template rig is too big.
    """
    rng = np.random.default_rng(derive_seed(seed, "toy", category))
    parent = [-1] + [int(rng.integers(j)) for j in range(1, num_joints)]
    offsets = rng.normal(size=(num_joints, 3)) * 0.1
    offsets[0] = 0.0
    chain = KinematicChain(tuple(parent), offsets)
    t = np.arange(frames) / 30.0
    freq = rng.uniform(0.8, 2.0)
    phase = rng.uniform(0, 2 * np.pi, (1, num_joints, 3))
    theta = 0.5 * np.sin(2 * np.pi * freq * t[:, None, None] + phase)
    root = np.zeros((frames, 3))
    root[:, 0] = 0.1 * t
    joints = forward_kinematics(chain, theta, root)
    camera = place_camera(joints, image_size, 0.1, float(rng.uniform(0, 2 * np.pi)))
    pixels = add_keypoint_noise(project_perspective(joints, camera), noise_px, derive_seed(seed, "toy-noise"))
    x, _, record = normalize_sequence(pixels, joints)
    mm = joints * record.world_to_mm
    fitted = KinematicChain.from_positions(chain.parent, mm[0], chain.joint_names)
    skeleton = SkeletonSequence3D(mm, fitted, category, f"{category}_{seed:03d}")
    keypoints = KeypointSequence2D(x, np.ones(x.shape[:2], np.int8), camera, noise_sigma(noise_px))
    return SequenceRecord(skeleton, keypoints, record)


def generate_dataset(config: GenerationConfig, out_dir, jobs: int = 1) -> SplitManifest:
    """Write every sequence plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    seq_dir = out / "sequences"
    seq_dir.mkdir(parents=True, exist_ok=True)
    work = [(t, i) for t in config.templates for i in range(config.sequences_per_category)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            records = list(pool.map(_generate_one, [(t, i, config) for t, i in work]))
    else:
        records = [_generate_one((t, i, config)) for t, i in work]
    for rec in records:
        rec.save(seq_dir / f"{rec.sequence_id}.json")
        log.info("wrote %s", rec.sequence_id)
    manifest = split_dataset(records, config.train_fraction, derive_seed(config.seed, "split"))
    manifest.save(out / "manifest.json")
    return manifest


def _generate_one(args):
    template, index, config = args
    return generate_sequence(template, index, config)


def load_dataset(root) -> tuple[dict[str, SequenceRecord], SplitManifest]:
    root = Path(root)
    manifest = SplitManifest.load(root / "manifest.json")
    records = {}
    for sid in manifest.train_ids + manifest.test_ids:
        records[sid] = SequenceRecord.load(root / "sequences" / f"{sid}.json")
    return records, manifest
