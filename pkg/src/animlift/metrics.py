"""Frame-aligned and sequence-aligned error metrics plus evaluation harnesses.

All metric functions take ground truth ``y`` and a canonical prediction
``y_hat`` of shape ``(T, J, 3)``; errors come out in the units of ``y``
(millimeters when ``y`` is stored in millimeters).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dataset import KeypointSequence2D, SequenceRecord, SplitManifest, derive_seed, mask_random_joints
from .errors import DegenerateCloud, DegenerateFrame, DegenerateSequence, InvalidInput, ShapeMismatch, TooShort
from .geometry import solve_procrustes


def _prepare(y, y_hat, joint_mask):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 3 or y.shape[2] != 3:
        raise ShapeMismatch(f"expected matching (T, J, 3) arrays, got {y.shape} and {y_hat.shape}")
    if joint_mask is None:
        keep = np.arange(y.shape[1])
    else:
        keep = np.flatnonzero(np.asarray(joint_mask).astype(bool))
    return y[:, keep], y_hat[:, keep]


def frame_alignment(y, y_hat, joint_mask=None, with_scale: bool = True) -> np.ndarray:
    """Per-frame Procrustes-aligned prediction on the masked joints."""
    y, y_hat = _prepare(y, y_hat, joint_mask)
    if y.shape[1] < 3:
        raise DegenerateFrame(0, f"only {y.shape[1]} present joints")
    out = np.empty_like(y_hat)
    for t in range(y.shape[0]):
        try:
            res = solve_procrustes(y[t], y_hat[t], with_scale)
        except DegenerateCloud as e:
            raise DegenerateFrame(t, str(e)) from None
        out[t] = res.apply(y_hat[t])
    return out


def sequence_alignment(y, y_hat, joint_mask=None, with_scale: bool = True, centering: str = "frame") -> np.ndarray:
    """One rotation (and scale) for the whole sequence.

    With ``centering="frame"`` every frame of both sequences is centered on its
    own centroid, the rotation is solved on the stacked centered clouds, and
    each aligned frame is moved back onto its ground-truth centroid.
    ``centering="sequence"`` centers on the whole-sequence centroid instead.
    """
    y, y_hat = _prepare(y, y_hat, joint_mask)
    T, J, _ = y.shape
    if T * J < 3:
        raise DegenerateSequence("fewer than 3 joints in sequence")
    if centering == "frame":
        cy = y.mean(1, keepdims=True)
        cp = y_hat.mean(1, keepdims=True)
    elif centering == "sequence":
        cy = y.reshape(-1, 3).mean(0)[None, None]
        cp = y_hat.reshape(-1, 3).mean(0)[None, None]
    else:
        raise InvalidInput(f"centering must be 'frame' or 'sequence', got {centering!r}")
    yc = (y - cy).reshape(-1, 3)
    pc = (y_hat - cp).reshape(-1, 3)
    try:
        res = solve_procrustes(yc, pc, with_scale)
    except DegenerateCloud as e:
        raise DegenerateSequence(str(e)) from None
    aligned = res.scale * pc @ res.rotation.T
    return aligned.reshape(T, J, 3) + cy


def fa_mpjpe(y, y_hat, joint_mask=None, with_scale: bool = True) -> float:
    """Mean joint error after per-frame similarity alignment."""
    y_m, _ = _prepare(y, y_hat, joint_mask)
    aligned = frame_alignment(y, y_hat, joint_mask, with_scale)
    return float(np.linalg.norm(y_m - aligned, axis=-1).mean())


def sa_mpjpe(y, y_hat, joint_mask=None, with_scale: bool = True, centering: str = "frame") -> float:
    """Mean joint error after a single whole-sequence alignment."""
    y_m, _ = _prepare(y, y_hat, joint_mask)
    aligned = sequence_alignment(y, y_hat, joint_mask, with_scale, centering)
    return float(np.linalg.norm(y_m - aligned, axis=-1).mean())


def sa_mpve(y, y_hat, joint_mask=None, with_scale: bool = True, centering: str = "frame") -> float:
    """Mean velocity error (per frame) after the whole-sequence alignment."""
    y_m, _ = _prepare(y, y_hat, joint_mask)
    if y_m.shape[0] < 2:
        raise TooShort("velocity error needs at least 2 frames")
    aligned = sequence_alignment(y, y_hat, joint_mask, with_scale, centering)
    dv = np.diff(y_m, axis=0) - np.diff(aligned, axis=0)
    return float(np.linalg.norm(dv, axis=-1).mean())


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    fa_mpjpe: float
    sa_mpjpe: float
    sa_mpve: float
    per_category: dict = field(default_factory=dict)
    per_sequence: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    scenario: str = "clean"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MetricReport":
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence_id", "category", "fa_mpjpe", "sa_mpjpe", "sa_mpve"])
        for sid, row in self.per_sequence.items():
            w.writerow([sid, row["category"], repr(row["fa_mpjpe"]), repr(row["sa_mpjpe"]), repr(row["sa_mpve"])])
        return buf.getvalue()


def aggregate(rows: dict, scenario: str = "clean") -> MetricReport:
    """Means over sequences, overall and per category (ordered by sequence id)."""
    keys = ("fa_mpjpe", "sa_mpjpe", "sa_mpve")
    if not rows:
        raise InvalidInput("no sequences to aggregate")
    rows = {k: rows[k] for k in sorted(rows)}
    cats: dict[str, list] = {}
    for row in rows.values():
        cats.setdefault(row["category"], []).append(row)
    per_cat = {
        c: {k: float(np.mean([r[k] for r in rs])) for k in keys} | {"sequences": len(rs)}
        for c, rs in sorted(cats.items())
    }
    overall = {k: float(np.mean([r[k] for r in rows.values()])) for k in keys}
    counts = {"sequences": len(rows), "frames": int(sum(r["frames"] for r in rows.values())),
              "categories": len(cats)}
    return MetricReport(overall["fa_mpjpe"], overall["sa_mpjpe"], overall["sa_mpve"], per_cat, rows, counts, scenario)


def sequence_metrics(y, y_hat, joint_mask=None) -> dict:
    return {
        "fa_mpjpe": fa_mpjpe(y, y_hat, joint_mask),
        "sa_mpjpe": sa_mpjpe(y, y_hat, joint_mask),
        "sa_mpve": sa_mpve(y, y_hat, joint_mask) if np.shape(y)[0] > 1 else 0.0,
    }


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class Scenario:
    kind: str
    fraction: float = 0.0
    category: str = ""

    @classmethod
    def parse(cls, text: str) -> "Scenario":
        """``clean``, ``noisy``, ``occluded:<f>``, ``holdout:<category>`` or ``unseen_rig``."""
        name, _, arg = text.partition(":")
        if name in ("clean", "noisy", "unseen_rig") and not arg:
            return cls(name)
        if name == "occluded":
            try:
                f = float(arg)
            except ValueError:
                raise InvalidInput(f"bad occlusion fraction in {text!r}") from None
            if not 0 <= f <= 1:
                raise InvalidInput(f"occlusion fraction must lie in [0, 1], got {f}")
            return cls(name, fraction=f)
        if name == "holdout" and arg:
            return cls(name, category=arg)
        raise InvalidInput(f"unknown scenario {text!r}")

    def __str__(self):
        if self.kind == "occluded":
            return f"occluded:{self.fraction:g}"
        if self.kind == "holdout":
            return f"holdout:{self.category}"
        return self.kind


def select_records(records: dict[str, SequenceRecord], manifest: SplitManifest, scenario: Scenario) -> list[SequenceRecord]:
    """Sequences a scenario is evaluated on."""
    if scenario.kind == "holdout":
        chosen = [r for r in records.values() if r.category == scenario.category]
    elif scenario.kind == "unseen_rig":
        train_max = max(records[i].num_joints for i in manifest.train_ids)
        chosen = [r for r in records.values() if r.num_joints > train_max]
    else:
        chosen = [records[i] for i in manifest.test_ids]
    if not chosen:
        raise InvalidInput(f"scenario {scenario} selects no sequences")
    return sorted(chosen, key=lambda r: r.sequence_id)


def holdout_manifest(manifest: SplitManifest, category: str) -> SplitManifest:
    """Training split with one category removed (its sequences become the test set)."""
    train = {c: ids for c, ids in manifest.train_sequence_ids.items() if c != category}
    test = {category: sorted(manifest.train_sequence_ids.get(category, []) + manifest.test_sequence_ids.get(category, []))}
    return SplitManifest(train, test, manifest.seed)


def unseen_rig_manifest(manifest: SplitManifest, records: dict[str, SequenceRecord], max_train_joints: int) -> SplitManifest:
    """Train only on rigs with at most ``max_train_joints`` joints; test on the rest."""
    train, test = {}, {}
    for c, ids in manifest.train_sequence_ids.items():
        for i in ids:
            (test if records[i].num_joints > max_train_joints else train).setdefault(c, []).append(i)
    for c, ids in manifest.test_sequence_ids.items():
        test.setdefault(c, []).extend(ids)
    return SplitManifest(train, test, manifest.seed)


def scenario_inputs(record: SequenceRecord, scenario: Scenario, seed: int) -> KeypointSequence2D:
    kp = record.keypoints
    if scenario.kind == "clean":
        kp = KeypointSequence2D(record.exact_keypoints(), np.ones_like(kp.presence), kp.camera, 0.0)
    if scenario.kind == "occluded" and scenario.fraction > 0:
        kp = mask_random_joints(kp, scenario.fraction, derive_seed(seed, "occlusion", record.sequence_id))
    return kp


Predictor = Callable[[SequenceRecord, KeypointSequence2D], np.ndarray]


def model_predictor(model, clip_len: int | None = None) -> Predictor:
    from .model import lift_sequence

    def predict(record, kp):
        return lift_sequence(model, kp.keypoints, kp.presence, record.skeleton.chain.adjacency, clip_len)

    return predict


def ground_truth_predictor(record: SequenceRecord, kp) -> np.ndarray:
    """Stub predictor returning the normalized ground truth."""
    return record.target_normalized


def evaluate(predictor, records, scenario="clean", seed: int = 0) -> MetricReport:
    """Lift every record under ``scenario`` and report metrics in millimeters.

    ``predictor`` is a :class:`~animlift.model.LiftingModel` or any callable
    ``(record, keypoints) -> (T, J, 3)``.
    """
    from .model import LiftingModel

    if isinstance(predictor, LiftingModel):
        predictor = model_predictor(predictor)
    if isinstance(scenario, str):
        scenario = Scenario.parse(scenario)
    rows = {}
    for rec in records:
        kp = scenario_inputs(rec, scenario, seed)
        pred = predictor(rec, kp)
        row = sequence_metrics(rec.skeleton.joints, pred)
        row["category"] = rec.category
        row["frames"] = rec.skeleton.num_frames
        rows[rec.sequence_id] = row
    return aggregate(rows, str(scenario))


def occlusion_sweep(predictor, records, fractions=(0.0, 0.1, 0.3, 0.6), seed: int = 0) -> list[MetricReport]:
    return [evaluate(predictor, records, Scenario("occluded", fraction=f), seed) for f in fractions]


def write_curve_csv(path, fractions, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["occlusion", "fa_mpjpe", "sa_mpjpe", "sa_mpve"])
        for f, r in zip(fractions, reports):
            w.writerow([f, repr(r.fa_mpjpe), repr(r.sa_mpjpe), repr(r.sa_mpve)])


def write_curve_svg(path, fractions, reports):
    """Error-vs-occlusion plot (FA-MPJPE and SA-MPJPE) as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    pct = [100 * f for f in fractions]
    ax.plot(pct, [r.fa_mpjpe for r in reports], "o-", label="FA-MPJPE")
    ax.plot(pct, [r.sa_mpjpe for r in reports], "s--", label="SA-MPJPE")
    ax.set_xlabel("occluded keypoints (%)")
    ax.set_ylabel("error (mm)")
    ax.legend()
    fig.tight_layout()
    plt.rcParams["svg.hashsalt"] = "animlift"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
