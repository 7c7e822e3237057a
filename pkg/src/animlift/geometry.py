"""Rotations, pinhole projection and orthogonal Procrustes alignment.

Conventions used throughout the package:

* Rotation matrices act on column vectors, ``p' = R @ p``. Point clouds are
  stored row-wise (``N x 3``), so applying ``R`` to a cloud is ``cloud @ R.T``.
* :func:`solve_procrustes` returns the rotation that maps *source* onto
  *target*: ``target_c ~= scale * source_c @ rotation.T`` on centered clouds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BehindCamera, DegenerateCloud, InvalidInput, ShapeMismatch

RANK_TOL = 1e-10
_SMALL_ANGLE_SQ = 1e-8


def skew(v):
    """Cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(aa) -> np.ndarray:
    """Axis-angle vector to rotation matrix.

    The vector's direction is the axis and its norm the angle in radians.
    Small angles fall back to the second-order series so the map is total.
    """
    aa = np.asarray(aa, dtype=np.float64)
    if aa.shape != (3,):
        raise ShapeMismatch(f"axis-angle must have shape (3,), got {aa.shape}")
    theta_sq = float(aa @ aa)
    K = skew(aa)
    if theta_sq < _SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0
        b = 0.5 - theta_sq / 24.0
    else:
        theta = np.sqrt(theta_sq)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta_sq
    return np.eye(3) + a * K + b * (K @ K)


def rodrigues_torch(aa: torch.Tensor) -> torch.Tensor:
    """Batched, autograd-safe Rodrigues map ``(..., 3) -> (..., 3, 3)``.

    Uses ``theta**2`` rather than ``theta`` so the gradient at the zero
    rotation is well defined (this is where IK starts).
    """
    theta_sq = (aa * aa).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)

    x, y, z = aa.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack(
        [
            torch.stack([zero, -z, y], -1),
            torch.stack([z, zero, -x], -1),
            torch.stack([-y, x, zero], -1),
        ],
        -2,
    )
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0) and abs(np.linalg.det(R) - 1.0) <= tol
    )


# ---------------------------------------------------------------------------
# Procrustes


@dataclass(frozen=True)
class AlignmentResult:
    """Similarity alignment of a source cloud onto a target cloud.

    ``residual`` is the squared Frobenius error of the centered clouds after
    applying ``rotation`` and ``scale``.
    """

    rotation: np.ndarray
    scale: float
    residual: float
    target_centroid: np.ndarray = field(repr=False)
    source_centroid: np.ndarray = field(repr=False)

    def apply(self, points) -> np.ndarray:
        """Map source-frame points into the target frame."""
        points = np.asarray(points, dtype=np.float64)
        return self.scale * (points - self.source_centroid) @ self.rotation.T + self.target_centroid


def _kabsch(target_c: np.ndarray, source_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    H = source_c.T @ target_c
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    return Vt.T @ D @ U.T, S * np.diag(D)


def solve_procrustes(target, source, with_scale: bool = True) -> AlignmentResult:
    """Best proper rotation (and optionally scale) taking ``source`` onto ``target``.

    Both clouds are centered on their own centroids first. When the cross
    covariance would yield a reflection, the axis of the smallest singular
    value is flipped so that ``det(rotation) == +1``.

    Raises:
        DegenerateCloud: centered source has rank < 2.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if target.shape != source.shape or target.ndim != 2 or target.shape[1] != 3:
        raise ShapeMismatch(f"expected matching (J, 3) clouds, got {target.shape} and {source.shape}")
    if target.shape[0] < 3:
        raise InvalidInput(f"need at least 3 points, got {target.shape[0]}")

    ct = target.mean(0)
    cs = source.mean(0)
    tc = target - ct
    sc = source - cs
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= RANK_TOL * sv[0]:
        raise DegenerateCloud(f"source cloud rank < 2 (singular values {sv})")

    R, signed_s = _kabsch(tc, sc)
    rotated = sc @ R.T
    scale = float(signed_s.sum() / (sc * sc).sum()) if with_scale else 1.0
    residual = float(((tc - scale * rotated) ** 2).sum())
    return AlignmentResult(R, scale, residual, ct, cs)


def procrustes_torch(target: torch.Tensor, source: torch.Tensor, weights: torch.Tensor | None = None, with_scale: bool = True):
    """Batched weighted Procrustes over the last two axes ``(..., N, 3)``.

    ``weights`` (``(..., N)``, 0/1) excludes points from the centroids and the
    cross covariance. Degenerate inputs are not rejected here; callers that
    need that check use :func:`solve_procrustes`.

    Returns:
        rotation ``(..., 3, 3)``, scale ``(...)``, and the weighted centroids
        of target and source ``(..., 3)``.
    """
    if weights is None:
        weights = torch.ones(target.shape[:-1], dtype=target.dtype, device=target.device)
    w = weights[..., None]
    count = w.sum(-2).clamp_min(1.0)
    ct = (target * w).sum(-2) / count
    cs = (source * w).sum(-2) / count
    tc = (target - ct[..., None, :]) * w
    sc = (source - cs[..., None, :]) * w

    H = sc.transpose(-1, -2) @ tc
    U, S, Vh = torch.linalg.svd(H)
    V = Vh.transpose(-1, -2)
    Ut = U.transpose(-1, -2)
    d = torch.sign(torch.linalg.det(V @ Ut))
    d = torch.where(d == 0, torch.ones_like(d), d)
    ones = torch.ones_like(d)
    D = torch.diag_embed(torch.stack([ones, ones, d], -1))
    R = V @ D @ Ut
    if with_scale:
        trace = (S * torch.stack([ones, ones, d], -1)).sum(-1)
        norm_sq = (sc * sc).sum((-1, -2))
        scale = trace / norm_sq.clamp_min(torch.finfo(norm_sq.dtype).tiny)
    else:
        scale = torch.ones_like(d)
    return R, scale, ct, cs


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; world point ``p`` maps to ``rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    focal_length: float
    principal_point: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        if not self.focal_length > 0:
            raise InvalidInput(f"focal_length must be positive, got {self.focal_length}")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise InvalidInput(f"image_size must be two positive ints, got {self.image_size}")

    def to_camera(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "focal": float(self.focal_length),
            "principal_point": self.principal_point.tolist(),
            "image_size": [int(v) for v in self.image_size],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64),
            translation=np.asarray(d["translation"], dtype=np.float64),
            focal_length=float(d["focal"]),
            principal_point=np.asarray(d["principal_point"], dtype=np.float64),
            image_size=tuple(int(v) for v in d["image_size"]),
        )


def project_perspective(points, camera: Camera) -> np.ndarray:
    """Pinhole projection of ``(..., 3)`` world points to ``(..., 2)`` pixels."""
    cam = camera.to_camera(points)
    depth = cam[..., 2]
    bad = np.argwhere(~(depth > 0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        frame = idx[0] if len(idx) > 1 else 0
        joint = idx[-1]
        raise BehindCamera(frame, joint)
    uv = camera.focal_length * cam[..., :2] / depth[..., None]
    return uv + camera.principal_point


def unproject(uv, depth, camera: Camera) -> np.ndarray:
    """Inverse of :func:`project_perspective` given camera-space depths."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    xy = (uv - camera.principal_point) * depth[..., None] / camera.focal_length
    cam = np.concatenate([xy, depth[..., None]], -1)
    return (cam - camera.translation) @ camera.rotation


def place_camera(sequence, image_size=(512, 512), margin: float = 0.05, yaw: float = 0.0,
                 distance_factor: float = 3.0) -> Camera:
    """Frame a joint sequence so its mean sits at the image center.

    The camera is placed ``distance_factor`` times the sequence radius away
    from the mean point, looking along ``rotation_y(yaw) @ (0, 0, 1)``, with
    image ``v`` increasing toward world ``-y``. The focal length is the
    largest one that keeps every joint inside the image shrunk by ``margin``
    (fraction of the full extent split evenly between both sides).
    """
    pts = np.asarray(sequence, dtype=np.float64).reshape(-1, 3)
    if pts.size == 0:
        raise InvalidInput("cannot place a camera for an empty sequence")
    W, H = int(image_size[0]), int(image_size[1])
    center = pts.mean(0)
    radius = float(np.linalg.norm(pts - center, axis=1).max())
    distance = distance_factor * radius if radius > 0 else 1.0

    Ry = rotation_y(yaw)
    right = Ry @ np.array([-1.0, 0.0, 0.0])
    down = np.array([0.0, -1.0, 0.0])
    forward = Ry @ np.array([0.0, 0.0, 1.0])
    R = np.stack([right, down, forward])
    position = center - distance * forward
    t = -R @ position

    cam = pts @ R.T + t
    half = 0.5 * (1.0 - margin) * np.array([W, H], dtype=np.float64)
    ratio = np.abs(cam[:, :2] / cam[:, 2:3])
    with np.errstate(divide="ignore"):
        limits = np.where(ratio > 0, half / np.where(ratio > 0, ratio, 1.0), np.inf)
    focal = float(limits.min())
    if not np.isfinite(focal):
        focal = float(max(W, H))
    return Camera(R, t, focal, np.array([W / 2.0, H / 2.0]), (W, H))
