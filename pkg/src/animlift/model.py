"""Category-agnostic 2D-to-3D lifting network.

RFF keypoint features -> windowed temporal attention per joint (motion
encoder) -> local/global joint attention per frame (space encoder) ->
per-joint MLP decoder producing canonical 3D coordinates.

Tensor layout inside the network is ``(B, T, J, D)``. Padded joints carry a
zero ``joint_mask`` entry; occluded keypoints carry a zero ``presence`` entry.
Both have their input features zeroed. Padded joints are also excluded from
every joint-attention softmax and produce zero output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, ShapeMismatch, TooManyJoints

TEMPORAL_EMBEDDINGS = ("analytical_rff", "learned", "none")
MASK_MODES = ("strict", "multiplicative")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    feature_dim: int = 256
    motion_layers: int = 4
    space_layers: int = 12
    heads: int = 8
    window_alpha: int | None = 8  # None: unbounded window
    max_joints: int = 29
    rff_seed: int = 0
    init_seed: int = 0
    temporal_embedding: str = "analytical_rff"
    max_frames: int = 256
    mask_mode: str = "strict"
    dtype: str = "float64"

    def __post_init__(self):
        D, H = self.feature_dim, self.heads
        if D <= 0 or D % 2:
            raise ConfigError(f"feature_dim must be a positive even integer, got {D}")
        if H <= 0 or D % H:
            raise ConfigError(f"heads ({H}) must divide feature_dim ({D})")
        if self.motion_layers < 1 or self.space_layers < 1:
            raise ConfigError("motion_layers and space_layers must be >= 1")
        if self.window_alpha is not None and self.window_alpha < 0:
            raise ConfigError("window_alpha must be >= 0 or None (unbounded)")
        if self.temporal_embedding not in TEMPORAL_EMBEDDINGS:
            raise ConfigError(f"temporal_embedding must be one of {TEMPORAL_EMBEDDINGS}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Masks and features


def build_joint_mask(present, max_joints: int) -> np.ndarray:
    """1 for present joints, 0 for absent or padded slots up to ``max_joints``."""
    present = np.asarray(present).astype(bool).ravel()
    if present.size > max_joints:
        raise TooManyJoints(f"{present.size} joints exceed max_joints={max_joints}")
    mask = np.zeros(max_joints, dtype=np.int8)
    mask[: present.size] = present
    return mask


def build_window_mask(T: int, alpha: int | None) -> np.ndarray:
    """``Z[t, i] = 1`` iff ``|t - i| <= alpha``; ``alpha=None`` allows everything."""
    if T < 1:
        raise ShapeMismatch("T must be >= 1")
    if alpha is None:
        return np.ones((T, T), dtype=np.int8)
    idx = np.arange(T)
    return (np.abs(idx[:, None] - idx[None, :]) <= alpha).astype(np.int8)


def normalized_time(T: int, offset: float = 0.0, dtype=torch.float64) -> torch.Tensor:
    """Frame index mapped to [0, 1] (shifted by ``offset`` frames)."""
    t = torch.arange(T, dtype=dtype) + offset
    return t / (T - 1) if T > 1 else t


class RffBasis(nn.Module):
    """Fixed random Fourier basis: ``W ~ N(0, I)`` of shape ``(D/2, 3)``, ``b ~ U(0, 1/(2 pi))``."""

    def __init__(self, feature_dim: int, seed: int = 0, dtype=torch.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((feature_dim // 2, 3))
        b = rng.uniform(0.0, 1.0 / (2.0 * np.pi), size=feature_dim // 2)
        self.register_buffer("W", torch.as_tensor(W, dtype=dtype))
        self.register_buffer("b", torch.as_tensor(b, dtype=dtype))

    @property
    def feature_dim(self) -> int:
        return 2 * self.W.shape[0]

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return rff_encode(points, self.W, self.b)


def rff_encode(points, W, b):
    """``sqrt(2/D) [sin(W p + b); cos(W p + b)]`` over the last axis of ``points``."""
    proj = points @ W.transpose(-1, -2) + b
    D = 2 * W.shape[0]
    return math.sqrt(2.0 / D) * torch.cat([torch.sin(proj), torch.cos(proj)], -1)


# ---------------------------------------------------------------------------
# Attention


def masked_softmax(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Softmax where disallowed entries get exactly zero weight.

    Rows with nothing allowed come out all-zero instead of NaN.
    """
    neg = torch.finfo(logits.dtype).min
    w = torch.softmax(logits.masked_fill(~allowed, neg), -1)
    return w * allowed


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x, allowed=None, multiplicative=None, return_weights=False):
        """Self-attention over axis -2 of ``x`` ``(N, L, D)``.

        ``allowed`` ``(N or 1, L, L)`` hard-masks keys. ``multiplicative``
        ``(L, L)`` instead scales the logits before the softmax (the literal
        reading of the window mask, kept for comparison runs).
        """
        N, L, D = x.shape
        split = lambda t: t.view(N, L, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        if multiplicative is None and not return_weights:
            # fused kernel; every row of ``allowed`` must keep at least one key
            mask = None if allowed is None else allowed[:, None]
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            return self.proj(out.transpose(1, 2).reshape(N, L, D))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if multiplicative is not None:
            w = torch.softmax(logits * multiplicative, -1)
        elif allowed is not None:
            w = masked_softmax(logits, allowed[:, None])
        else:
            w = torch.softmax(logits, -1)
        out = self.proj((w @ v).transpose(1, 2).reshape(N, L, D))
        return (out, w) if return_weights else out


class WindowedMHSA(nn.Module):
    """One motion layer: ``LayerNorm(x + MHSA_window(x))`` over the time axis."""

    def __init__(self, dim: int, heads: int, mask_mode: str = "strict"):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads)
        self.norm = nn.LayerNorm(dim)
        self.mask_mode = mask_mode

    def forward(self, x, window, return_weights=False):
        """``x`` ``(N, T, D)``; ``window`` ``(T, T)`` 0/1."""
        window = window.to(torch.bool)
        if self.mask_mode == "multiplicative":
            out = self.attn(x, multiplicative=window.to(x.dtype), return_weights=return_weights)
        else:
            out = self.attn(x, allowed=window[None], return_weights=return_weights)
        if return_weights:
            out, w = out
            return self.norm(x + out), w
        return self.norm(x + out)


class MotionEncoder(nn.Module):
    def __init__(self, dim: int, heads: int, layers: int, mask_mode: str = "strict"):
        super().__init__()
        self.layers = nn.ModuleList(WindowedMHSA(dim, heads, mask_mode) for _ in range(layers))

    def forward(self, F_in, window, joint_mask):
        """``F_in`` ``(B, T, J, D)`` -> same shape; attention runs per joint over time."""
        B, T, J, D = F_in.shape
        h = F_in.transpose(1, 2).reshape(B * J, T, D)
        keep = joint_mask.to(h.dtype).reshape(B * J, 1, 1)
        for layer in self.layers:
            h = layer(h, window) * keep
        return h.reshape(B, J, T, D).transpose(1, 2)


class SpaceEncoderLayer(nn.Module):
    """Adjacency-restricted and global joint attention fused by an MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.local = MultiHeadAttention(dim, heads)
        self.glob = MultiHeadAttention(dim, heads)
        self.fuse = nn.Sequential(nn.Linear(2 * dim, dim), nn.GELU(), nn.Linear(dim, dim))
        self.norm = nn.LayerNorm(dim)

    def streams(self, x, adjacency, joint_mask):
        """Local and global stream outputs for ``x`` ``(B, T, J, D)``."""
        B, T, J, D = x.shape
        valid = joint_mask.to(torch.bool)
        eye = torch.eye(J, dtype=torch.bool, device=x.device)
        # padded queries see only themselves; their outputs are zeroed later
        local_ok = ((adjacency.to(torch.bool) | eye) & valid[:, None, :]) | eye
        global_ok = valid[:, None, :] | eye
        h = x.reshape(B * T, J, D)
        rep = lambda m: m[:, None].expand(B, T, J, J).reshape(B * T, J, J)
        g_local = self.local(h, allowed=rep(local_ok)).reshape(B, T, J, D)
        g_global = self.glob(h, allowed=rep(global_ok)).reshape(B, T, J, D)
        return g_local, g_global

    def forward(self, x, adjacency, joint_mask):
        g_local, g_global = self.streams(x, adjacency, joint_mask)
        out = self.norm(x + self.fuse(torch.cat([g_local, g_global], -1)))
        return out * joint_mask.to(out.dtype)[:, None, :, None]


class CanonicalDecoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.hidden = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, 3)

    def forward(self, x):
        return self.out(F.gelu(self.hidden(x)))


class LiftingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        D = config.feature_dim
        dtype = config.torch_dtype
        self.rff = RffBasis(D, config.rff_seed, dtype)
        if config.temporal_embedding == "learned":
            self.time_table = nn.Parameter(torch.zeros(config.max_frames, D))
        self.motion = MotionEncoder(D, config.heads, config.motion_layers, config.mask_mode)
        self.space = nn.ModuleList(SpaceEncoderLayer(D, config.heads) for _ in range(config.space_layers))
        self.decoder = CanonicalDecoder(D)
        self.to(dtype)
        self.reset_parameters(config.init_seed)

    def reset_parameters(self, seed: int):
        """Fan-in scaled normal weights, zero biases, unit layer-norm gains."""
        g = torch.Generator().manual_seed(int(seed))
        normal = lambda p: p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) / math.sqrt(p.shape[1]))
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    normal(m.weight)
                    if m.bias is not None:
                        m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
            if hasattr(self, "time_table"):
                normal(self.time_table)

    def features(self, x, presence, joint_mask, time_offset: float = 0.0):
        B, T, J, _ = x.shape
        emb = self.config.temporal_embedding
        if emb == "analytical_rff":
            t = normalized_time(T, time_offset, x.dtype).to(x.device)
            t = t[None, :, None, None].expand(B, T, J, 1)
        else:
            t = torch.zeros(B, T, J, 1, dtype=x.dtype, device=x.device)
        feats = self.rff(torch.cat([x, t], -1))
        keep = presence.to(x.dtype) * joint_mask.to(x.dtype)[:, None, :]
        feats = feats * keep[..., None]
        if emb == "learned":
            if T > self.config.max_frames:
                raise ShapeMismatch(f"T={T} exceeds max_frames={self.config.max_frames}")
            feats = feats + self.time_table[:T][None, :, None, :] * joint_mask.to(x.dtype)[:, None, :, None]
        return feats

    def forward(self, x, presence, joint_mask, adjacency, time_offset: float = 0.0):
        """Canonical 3D prediction ``(B, T, J, 3)`` from normalized 2D ``(B, T, J, 2)``."""
        if x.ndim != 4 or x.shape[-1] != 2:
            raise ShapeMismatch(f"x must be (B, T, J, 2), got {tuple(x.shape)}")
        B, T, J, _ = x.shape
        if presence.shape != (B, T, J) or joint_mask.shape != (B, J) or adjacency.shape != (B, J, J):
            raise ShapeMismatch("presence, joint_mask or adjacency shape disagrees with x")
        if J > self.config.max_joints:
            raise TooManyJoints(f"{J} joints exceed max_joints={self.config.max_joints}")
        window = torch.as_tensor(build_window_mask(T, self.config.window_alpha), device=x.device)
        h = self.features(x, presence, joint_mask, time_offset)
        h = self.motion(h, window, joint_mask)
        for layer in self.space:
            h = layer(h, adjacency, joint_mask)
        out = self.decoder(h)
        return out * joint_mask.to(out.dtype)[:, None, :, None]


def lift(model: LiftingModel, keypoints, presence, adjacency, time_offset: float = 0.0) -> np.ndarray:
    """Lift one normalized sequence ``(T, J, 2)`` to canonical ``(T, J, 3)``."""
    keypoints = np.asarray(keypoints)
    T, J, _ = keypoints.shape
    if J > model.config.max_joints:
        raise TooManyJoints(f"{J} joints exceed max_joints={model.config.max_joints}")
    dtype = model.config.torch_dtype
    x = torch.as_tensor(keypoints, dtype=dtype)[None]
    m = torch.as_tensor(np.asarray(presence), dtype=dtype)[None]
    jm = torch.ones(1, J, dtype=dtype)
    A = torch.as_tensor(np.asarray(adjacency), dtype=dtype)[None]
    with torch.no_grad():
        return model(x, m, jm, A, time_offset)[0].to(torch.float64).numpy()


def lift_sequence(model: LiftingModel, keypoints, presence, adjacency, clip_len: int | None = None) -> np.ndarray:
    """Lift a sequence of any length by tiling clips of ``clip_len`` frames.

    The final clip is right-aligned with the sequence end and only contributes
    frames not covered by earlier clips.
    """
    keypoints = np.asarray(keypoints)
    presence = np.asarray(presence)
    T = keypoints.shape[0]
    if clip_len is None or T <= clip_len:
        return lift(model, keypoints, presence, adjacency)
    out = np.empty(keypoints.shape[:2] + (3,))
    start = 0
    while start < T:
        s = min(start, T - clip_len)
        pred = lift(model, keypoints[s : s + clip_len], presence[s : s + clip_len], adjacency)
        out[start : s + clip_len] = pred[start - s :]
        start = s + clip_len
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def state_to_json(state: dict) -> list:
    out = []
    for name, t in state.items():
        t = t.detach().cpu()
        out.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch."),
                    "values": t.reshape(-1).tolist()})
    return out


def state_from_json(entries: list) -> dict:
    state = {}
    for e in entries:
        dtype = getattr(torch, e["dtype"])
        values = e["values"]
        state[e["name"]] = torch.tensor(values, dtype=dtype).reshape(e["shape"])
    return state


def save_checkpoint(path, model: LiftingModel, extra: dict | None = None):
    """JSON checkpoint: config echo plus every tensor, row-major."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "tensors": state_to_json(model.state_dict()),
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path) -> tuple[LiftingModel, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, full document)``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
        config = ModelConfig.from_dict(doc["model_config"])
        state = state_from_json(doc["tensors"])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}: {e.msg}") from None
    except KeyError as e:
        raise FormatError(f"{path}: missing field {e.args[0]!r}") from None
    model = LiftingModel(config)
    model.load_state_dict(state)
    return model, doc
