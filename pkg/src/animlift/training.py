"""Losses, gradient checks and the training loop for the lifting model."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import SequenceRecord, derive_seed, mask_random_joints
from .errors import ConfigError, DegenerateCloud, DegenerateFrame, EmptyDataset, FormatError, NonFinite, ShapeMismatch, TooShort
from .geometry import procrustes_torch, solve_procrustes
from .kinematics import safe_norm
from .model import LiftingModel, load_checkpoint, save_checkpoint, state_from_json, state_to_json

log = logging.getLogger(__name__)

REDUCTIONS = ("mean", "sum")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    velocity_weight: float = 5000.0
    epochs: int = 200
    max_steps: int | None = None
    batch_sequences: int = 32
    frames_per_clip: int = 48
    procrustes_loss: bool = True
    differentiate_alignment: bool = True
    reduction: str = "mean"
    occlusion_fraction: float = 0.0  # training-time joint dropout
    val_every: int = 1  # epochs between validations
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0 or self.velocity_weight < 0:
            raise ConfigError("weight_decay and velocity_weight must be non-negative")
        if self.epochs < 1 or self.batch_sequences < 1 or self.val_every < 1:
            raise ConfigError("epochs, batch_sequences and val_every must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.frames_per_clip < 1 or (self.velocity_weight > 0 and self.frames_per_clip < 2):
            raise ConfigError("frames_per_clip must be >= 2 when velocity_weight > 0")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if not 0 <= self.occlusion_fraction <= 1:
            raise ConfigError("occlusion_fraction must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    x: torch.Tensor  # (B, T, J, 2)
    presence: torch.Tensor  # (B, T, J)
    joint_mask: torch.Tensor  # (B, J)
    adjacency: torch.Tensor  # (B, J, J)
    target: torch.Tensor  # (B, T, J, 3)
    sequence_ids: list[str] = field(default_factory=list)


def make_batch(items, dtype=torch.float64) -> Batch:
    """Stack ``(keypoints, presence, target, adjacency, id)`` tuples, zero-padding joints."""
    if not items:
        raise EmptyDataset("cannot build an empty batch")
    T = items[0][0].shape[0]
    J = max(it[0].shape[1] for it in items)
    B = len(items)
    x = np.zeros((B, T, J, 2))
    pres = np.zeros((B, T, J))
    y = np.zeros((B, T, J, 3))
    jm = np.zeros((B, J))
    A = np.zeros((B, J, J))
    ids = []
    for i, (kp, p, tgt, adj, sid) in enumerate(items):
        if kp.shape[0] != T:
            raise ShapeMismatch("all clips in a batch need the same length")
        n = kp.shape[1]
        x[i, :, :n] = kp
        pres[i, :, :n] = p
        y[i, :, :n] = tgt
        jm[i, :n] = 1
        A[i, :n, :n] = adj
        ids.append(sid)
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    return Batch(t(x), t(pres), t(jm), t(A), t(y), ids)


def record_item(record: SequenceRecord, start: int = 0, length: int | None = None, occlusion: float = 0.0,
                seed: int = 0):
    """Clip ``[start, start + length)`` of a record as a batch item."""
    kp = record.keypoints
    if occlusion > 0:
        kp = mask_random_joints(kp, occlusion, seed)
    stop = kp.keypoints.shape[0] if length is None else start + length
    return (kp.keypoints[start:stop], kp.presence[start:stop], record.target_normalized[start:stop],
            record.skeleton.chain.adjacency, record.sequence_id)


# ---------------------------------------------------------------------------
# Alignment and losses


def align_prediction(target, pred, joint_mask=None):
    """Per-frame similarity alignment of ``pred`` onto ``target`` (both ``(T, J, 3)``).

    Each aligned frame is ``s_t * (pred_t - c_pred) @ R_t.T + c_target`` with
    centroids over the masked joints. Padded joints come back as zeros.

    Returns:
        aligned ``(T, J, 3)``, rotations ``(T, 3, 3)``, scales ``(T,)``.

    Raises:
        DegenerateFrame: a frame's present prediction has rank < 2.
    """
    target = np.asarray(target, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if target.shape != pred.shape or target.ndim != 3 or target.shape[2] != 3:
        raise ShapeMismatch(f"expected matching (T, J, 3) arrays, got {target.shape} and {pred.shape}")
    T, J, _ = target.shape
    keep = np.ones(J, bool) if joint_mask is None else np.asarray(joint_mask).astype(bool)
    aligned = np.zeros_like(pred)
    rotations = np.empty((T, 3, 3))
    scales = np.empty(T)
    for t in range(T):
        try:
            res = solve_procrustes(target[t, keep], pred[t, keep])
        except (DegenerateCloud, ValueError) as e:
            raise DegenerateFrame(t, str(e)) from None
        aligned[t, keep] = res.apply(pred[t, keep])
        rotations[t], scales[t] = res.rotation, res.scale
    return aligned, rotations, scales


def _as_batch(*arrays):
    out = [torch.as_tensor(a) for a in arrays]
    if out[0].ndim == 3:
        out = [a[None] for a in out]
    return out


def _mask_for(target, joint_mask):
    B, T, J, _ = target.shape
    if joint_mask is None:
        return torch.ones(B, J, dtype=target.dtype)
    m = torch.as_tensor(joint_mask, dtype=target.dtype)
    return m[None] if m.ndim == 1 else m


def frame_alignment_params(target, pred, joint_mask, differentiable: bool = False):
    """Per-frame rotation ``(B, T, 3, 3)`` and scale ``(B, T)`` mapping ``pred`` onto ``target``."""
    w = joint_mask[:, None, :].expand(target.shape[:3])
    src = pred if differentiable else pred.detach()
    R, s, _, _ = procrustes_torch(target, src, w)
    return R, s


def apply_alignment(target, pred, joint_mask, rotation, scale):
    """``s (pred - c_pred) R^T + c_target`` per frame, centroids over present joints."""
    w = joint_mask[:, None, :, None].expand(target.shape[:3] + (1,))
    count = w.sum(-2).clamp_min(1.0)
    ct = (target * w).sum(-2) / count
    cp = (pred * w).sum(-2) / count
    out = scale[..., None, None] * (pred - cp[..., None, :]) @ rotation.transpose(-1, -2) + ct[..., None, :]
    return out * w


def position_loss(target, pred, joint_mask=None, reduction: str = "sum") -> torch.Tensor:
    """Summed (or mean over present joint-frames) Euclidean joint error."""
    target, pred = _as_batch(target, pred)
    m = _mask_for(target, joint_mask)
    err = safe_norm(target - pred) * m[:, None, :]
    if reduction == "sum":
        return err.sum()
    return err.sum() / (m.sum() * target.shape[1])


def velocity_loss(target, pred, joint_mask=None, reduction: str = "sum") -> torch.Tensor:
    """Summed (or mean) error of frame-to-frame joint displacements."""
    target, pred = _as_batch(target, pred)
    if target.shape[1] < 2:
        raise TooShort("velocity loss needs at least 2 frames")
    m = _mask_for(target, joint_mask)
    dv = (target[:, 1:] - target[:, :-1]) - (pred[:, 1:] - pred[:, :-1])
    err = safe_norm(dv) * m[:, None, :]
    if reduction == "sum":
        return err.sum()
    return err.sum() / (m.sum() * (target.shape[1] - 1))


def total_loss(target, pred, joint_mask=None, velocity_weight: float = 5000.0, procrustes: bool = True,
               differentiate_alignment: bool = True, reduction: str = "mean", alignment=None):
    """Position plus weighted velocity loss on the (optionally) frame-aligned prediction.

    By default gradients flow through the per-frame rotation and scale (SVD
    backward). With ``differentiate_alignment=False`` they are computed from a
    detached prediction instead and only the centroid shift stays
    differentiable. ``alignment`` supplies fixed ``(rotation, scale)``.

    Returns:
        ``(loss, {"position": ..., "velocity": ...})`` with float parts.
    """
    target, pred = _as_batch(target, pred)
    m = _mask_for(target, joint_mask)
    if not (torch.isfinite(target).all() and torch.isfinite(pred).all()):
        raise NonFinite("non-finite target or prediction")
    if procrustes:
        if alignment is None:
            alignment = frame_alignment_params(target, pred, m, differentiate_alignment)
        pred = apply_alignment(target, pred, m, *alignment)
    pos = position_loss(target, pred, m, reduction)
    if velocity_weight == 0 and target.shape[1] < 2:
        vel = torch.zeros_like(pos)
    else:
        vel = velocity_loss(target, pred, m, reduction)
    loss = pos + velocity_weight * vel
    return loss, {"position": pos.item(), "velocity": vel.item()}


def batch_loss(model: LiftingModel, batch: Batch, config: TrainConfig, alignment=None):
    pred = model(batch.x, batch.presence, batch.joint_mask, batch.adjacency)
    return total_loss(batch.target, pred, batch.joint_mask, config.velocity_weight, config.procrustes_loss,
                      config.differentiate_alignment, config.reduction, alignment)


def compute_gradients(model: LiftingModel, batch: Batch, config: TrainConfig):
    """Loss value and gradient of every trainable tensor.

    Raises:
        NonFinite: the loss or a gradient is NaN or infinite.
    """
    model.zero_grad(set_to_none=True)
    loss, parts = batch_loss(model, batch, config)
    if not torch.isfinite(loss):
        raise NonFinite(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NonFinite(f"non-finite gradient in {name}")
        grads[name] = g.detach().clone()
    return loss.item(), grads


# ---------------------------------------------------------------------------
# Finite-difference checks


@dataclass
class GradCheckEntry:
    tensor: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(model: LiftingModel, batch: Batch, config: TrainConfig, n_coords: int = 30, h: float = 1e-4,
                   seed: int = 0, corrupt: str | None = None) -> list[GradCheckEntry]:
    """Compare analytic gradients with central differences at random coordinates.

    Under the default stop-gradient alignment the loss being differentiated is
    the one with rotation and scale frozen at the current parameters, so the
    numeric side freezes them too. ``corrupt`` names a tensor whose analytic
    gradient is deliberately perturbed (fault injection); some of the sampled
    coordinates are then drawn from it.
    """
    _, grads = compute_gradients(model, batch, config)
    params = dict(model.named_parameters())
    if corrupt is not None:
        if corrupt not in grads:
            raise ConfigError(f"unknown tensor {corrupt!r}")
        grads[corrupt] = grads[corrupt] * 1.1 + 1e-3

    alignment = None
    if config.procrustes_loss and not config.differentiate_alignment:
        with torch.no_grad():
            pred = model(batch.x, batch.presence, batch.joint_mask, batch.adjacency)
            alignment = frame_alignment_params(batch.target, pred, batch.joint_mask)

    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].numel() for n in names], dtype=np.float64)
    picks = []
    for k in range(n_coords):
        if corrupt is not None and k < max(1, n_coords // 3):
            name = corrupt
        else:
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = int(rng.integers(params[name].numel()))
        picks.append((name, flat))

    def loss_at():
        with torch.no_grad():
            return batch_loss(model, batch, config, alignment)[0].item()

    out = []
    for name, flat in picks:
        p = params[name]
        view = p.data.view(-1)
        orig = view[flat].item()
        view[flat] = orig + h
        up = loss_at()
        view[flat] = orig - h
        down = loss_at()
        view[flat] = orig
        numeric = (up - down) / (2 * h)
        idx = tuple(int(i) for i in np.unravel_index(flat, tuple(p.shape)))
        out.append(GradCheckEntry(name, idx, float(grads[name].view(-1)[flat]), numeric))
    return out


def ik_gradient_check(chain, theta, root_position, target, smoothness_weight: float = 0.1, n_coords: int = 30,
                      h: float = 1e-6, seed: int = 0) -> list[GradCheckEntry]:
    """Finite-difference check of the IK objective's gradient w.r.t. angles and root."""
    from .kinematics import ik_objective_torch

    th = torch.as_tensor(np.asarray(theta, dtype=np.float64)).clone().requires_grad_(True)
    rp = torch.as_tensor(np.asarray(root_position, dtype=np.float64)).clone().requires_grad_(True)
    tgt = torch.as_tensor(np.asarray(target, dtype=np.float64))
    ik_objective_torch(chain, th, rp, tgt, smoothness_weight).backward()
    rng = np.random.default_rng(seed)
    tensors = {"theta": th, "root_position": rp}
    out = []
    for _ in range(n_coords):
        name = "theta" if rng.random() < th.numel() / (th.numel() + rp.numel()) else "root_position"
        p = tensors[name]
        flat = int(rng.integers(p.numel()))
        view = p.data.view(-1)
        orig = view[flat].item()
        vals = []
        for step in (h, -h):
            view[flat] = orig + step
            with torch.no_grad():
                vals.append(ik_objective_torch(chain, th, rp, tgt, smoothness_weight).item())
        view[flat] = orig
        idx = tuple(int(i) for i in np.unravel_index(flat, tuple(p.shape)))
        out.append(GradCheckEntry(name, idx, float(p.grad.view(-1)[flat]), (vals[0] - vals[1]) / (2 * h)))
    return out


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: LiftingModel
    log: list[dict]
    steps: int
    best_val_fa_mpjpe: float | None
    best_state: dict | None


def _optimizer_to_json(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    state = {str(k): state_to_json(v) for k, v in sd["state"].items()}
    return {"state": state, "param_groups": sd["param_groups"]}


def _optimizer_from_json(opt: torch.optim.Optimizer, doc: dict):
    state = {int(k): state_from_json(v) for k, v in doc["state"].items()}
    groups = [dict(g, betas=tuple(g["betas"])) for g in doc["param_groups"]]
    opt.load_state_dict({"state": state, "param_groups": groups})


def make_optimizer(model: LiftingModel, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2),
                             weight_decay=config.weight_decay)


def validate(model: LiftingModel, records, clip_len: int | None = None) -> dict:
    from .metrics import evaluate, model_predictor

    report = evaluate(model_predictor(model, clip_len), records, "noisy")
    return {"val_fa_mpjpe": report.fa_mpjpe, "val_sa_mpjpe": report.sa_mpjpe, "val_sa_mpve": report.sa_mpve}


def train(model: LiftingModel, train_records, config: TrainConfig, val_records=None, out_dir=None,
          resume=None) -> TrainResult:
    """Train with AdamW on random contiguous clips, one clip per sequence per epoch.

    When ``out_dir`` is given, writes ``train_log.jsonl`` (one line per epoch),
    ``last.json`` (model, optimizer and RNG state for resuming) and
    ``best.json`` (lowest validation FA-MPJPE). ``resume`` is a ``last.json``
    path; training continues exactly where it stopped.

    Raises:
        NonFinite: loss or gradients became NaN/inf (after saving ``last.json``).
    """
    train_records = list(train_records)
    if not train_records:
        raise EmptyDataset("no training sequences")
    short = [r.sequence_id for r in train_records if r.skeleton.num_frames < config.frames_per_clip]
    if short:
        raise TooShort(f"sequences shorter than clip_len={config.frames_per_clip}: {short[:5]}")
    dtype = model.config.torch_dtype
    opt = make_optimizer(model, config)
    rng = np.random.default_rng(derive_seed(config.seed, "train"))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    epoch = step = 0
    best = None
    best_state = None
    if resume is not None:
        resumed, doc = load_checkpoint(resume)
        try:
            model.load_state_dict(resumed.state_dict())
            _optimizer_from_json(opt, doc["optimizer"])
            rng.bit_generator.state = doc["rng_state"]
            epoch, step = int(doc["epoch"]), int(doc["step"])
            history = list(doc["log"])
            best = doc.get("best_val_fa_mpjpe")
        except KeyError as e:
            raise FormatError(f"{resume}: not a resumable checkpoint (missing {e.args[0]!r})") from None
    if out is not None:
        # rewrite the log so it matches the resumed state exactly
        (out / "train_log.jsonl").write_text("".join(json.dumps(r) + "\n" for r in history))

    def save_last():
        if out is None:
            return
        save_checkpoint(out / "last.json", model, {
            "train_config": asdict(config), "optimizer": _optimizer_to_json(opt),
            "rng_state": rng.bit_generator.state, "epoch": epoch, "step": step, "log": history,
            "best_val_fa_mpjpe": best,
        })

    n = len(train_records)
    done = config.max_steps is not None and step >= config.max_steps
    while epoch < config.epochs and not done:
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses, pos, vel = [], [], []
        for b0 in range(0, n, config.batch_sequences):
            items = []
            for i in order[b0 : b0 + config.batch_sequences]:
                rec = train_records[i]
                start = int(rng.integers(rec.skeleton.num_frames - config.frames_per_clip + 1))
                occ_seed = int(rng.integers(2**31))
                items.append(record_item(rec, start, config.frames_per_clip, config.occlusion_fraction, occ_seed))
            batch = make_batch(items, dtype)
            opt.zero_grad(set_to_none=True)
            try:
                loss, parts = batch_loss(model, batch, config)
            except NonFinite:
                save_last()
                raise
            if not torch.isfinite(loss):
                save_last()
                raise NonFinite(f"non-finite loss at step {step} (epoch {epoch})")
            loss.backward()
            for name, p in model.named_parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    save_last()
                    raise NonFinite(f"non-finite gradient in {name} at step {step}")
            opt.step()
            step += 1
            losses.append(loss.item())
            pos.append(parts["position"])
            vel.append(parts["velocity"])
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        epoch += 1
        entry = {"epoch": epoch, "step": step, "train_loss": float(np.mean(losses)),
                 "train_position": float(np.mean(pos)), "train_velocity": float(np.mean(vel)),
                 "lr": config.learning_rate, "procrustes_loss": config.procrustes_loss,
                 "seconds": time.perf_counter() - t0}
        if val_records and (epoch % config.val_every == 0 or done or epoch == config.epochs):
            entry.update(validate(model, val_records, config.frames_per_clip))
            if best is None or entry["val_fa_mpjpe"] < best:
                best = entry["val_fa_mpjpe"]
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if out is not None:
                    save_checkpoint(out / "best.json", model, {"train_config": asdict(config), "epoch": epoch,
                                                               "step": step, "val_fa_mpjpe": best})
        history.append(entry)
        log.info("epoch %d step %d loss %.6g", epoch, step, entry["train_loss"])
        if out is not None:
            with open(out / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        save_last()
    return TrainResult(model, history, step, best, best_state)
