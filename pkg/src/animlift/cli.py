"""``animlift`` command line: dataset-gen, train, eval, lift, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dataset import SequenceRecord, SkeletonSequence3D, generate_dataset, load_dataset, toy_record
from .errors import ConfigError, FormatError, InvalidInput, LiftError
from .kinematics import KinematicChain
from .metrics import (
    Scenario,
    evaluate,
    ground_truth_predictor,
    model_predictor,
    occlusion_sweep,
    select_records,
    sequence_metrics,
    write_curve_csv,
    write_curve_svg,
)
from .model import LiftingModel, ModelConfig, load_checkpoint
from .training import TrainConfig, align_prediction, gradient_check, ik_gradient_check, make_batch, train

log = logging.getLogger("animlift")

OUT_ENV = "ANIMLIFT_OUT"
ORACLE = "ground-truth"
GRADCHECK_TOL = 1e-3
IK_GRADCHECK_TOL = 1e-4
SKELETON_VERSION = 1


def out_dir(args, config: RunConfig, command: str) -> Path:
    """``--out`` wins, then the config's ``paths.out``, then ``$ANIMLIFT_OUT/<command>``."""
    if args.out:
        path = Path(args.out)
    elif config.paths.out:
        path = Path(config.paths.out)
    else:
        path = Path(os.environ.get(OUT_ENV, "animlift_out")) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_config(args) -> RunConfig:
    if args.config is None:
        return RunConfig.from_dict({}, args.seed)
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return RunConfig.load(path, args.seed)


def dataset_dir(args, config: RunConfig) -> Path:
    path = args.dataset or config.paths.dataset
    if path is None:
        raise ConfigError("no dataset directory (use --dataset or paths.dataset)")
    if not (Path(path) / "manifest.json").is_file():
        raise InvalidInput(f"{path} has no manifest.json")
    return Path(path)


# ---------------------------------------------------------------------------
# Skeleton files (lift output)


def skeleton_to_dict(sk: SkeletonSequence3D, units: str) -> dict:
    return {
        "format_version": SKELETON_VERSION,
        "kind": "skeleton_sequence",
        "units": units,
        "category": sk.category,
        "sequence_id": sk.sequence_id,
        "fps": float(sk.fps),
        "num_frames": sk.num_frames,
        "num_joints": sk.num_joints,
        "joint_names": list(sk.chain.joint_names),
        "parent": list(sk.chain.parent),
        "joints_3d": sk.joints.ravel().tolist(),
    }


def load_skeleton(path) -> tuple[SkeletonSequence3D, str]:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
        if d.get("kind") != "skeleton_sequence":
            raise FormatError(f"{path}: field 'kind' must be 'skeleton_sequence'")
        T, J = int(d["num_frames"]), int(d["num_joints"])
        joints = np.asarray(d["joints_3d"], dtype=np.float64).reshape(T, J, 3)
        parent = tuple(int(p) for p in d["parent"])
        chain = KinematicChain.from_positions(parent, joints[0], tuple(d["joint_names"]))
        sk = SkeletonSequence3D(joints, chain, d["category"], d["sequence_id"], float(d["fps"]))
        return sk, d["units"]
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    except KeyError as e:
        raise FormatError(f"{path}: missing field {e.args[0]!r}") from None
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# Commands


def cmd_dataset_gen(args, config: RunConfig) -> int:
    out = out_dir(args, config, "dataset")
    manifest = generate_dataset(config.generation_config(), out, jobs=args.jobs)
    config.save(out / "config.json")
    n_train, n_test = len(manifest.train_ids), len(manifest.test_ids)
    print(f"wrote {n_train + n_test} sequences ({n_train} train / {n_test} test) to {out}")
    return 0


OVERFIT_PRESET = {
    "model": dict(feature_dim=32, heads=4, motion_layers=2, space_layers=2, window_alpha=4),
    "train": dict(learning_rate=1e-4, max_steps=2000, batch_sequences=2, frames_per_clip=8),
}


def overfit_setup(config: RunConfig):
    """Two toy sequences (8 frames, 5 joints) and the tiny overfitting model."""
    records = [toy_record(5, 8, seed=s) for s in range(2)]
    mc = ModelConfig(**{**_asdict(config.model), **OVERFIT_PRESET["model"]})
    tc = TrainConfig(**{**_asdict(config.train), "epochs": 10**6, **OVERFIT_PRESET["train"]})
    return records, mc, tc


def overfit_threshold(records) -> float:
    """5% of the smallest skeleton bounding-box diagonal (mm)."""
    return 0.05 * min(float(np.linalg.norm(np.ptp(r.skeleton.joints.reshape(-1, 3), 0))) for r in records)


def _asdict(obj) -> dict:
    from dataclasses import asdict

    return asdict(obj)


def cmd_train(args, config: RunConfig) -> int:
    out = out_dir(args, config, "train")
    if args.procrustes is not None:
        config.train = TrainConfig(**{**_asdict(config.train), "procrustes_loss": args.procrustes == "on"})
    if args.overfit:
        records, mc, tc = overfit_setup(config)
        config.model, config.train = mc, tc
        train_records, val_records = records, records
    else:
        records, manifest = load_dataset(dataset_dir(args, config))
        train_records = [records[i] for i in manifest.train_ids]
        val_records = [records[i] for i in manifest.test_ids]
    config.save(out / "config.json")
    model = LiftingModel(config.model)
    result = train(model, train_records, config.train, val_records or None, out, args.resume)
    if not (out / "best.json").exists():
        (out / "best.json").write_text((out / "last.json").read_text())
    last = result.log[-1] if result.log else {}
    mode = "on" if config.train.procrustes_loss else "off"
    if args.overfit:
        report = evaluate(model, train_records, "noisy")
        print(f"overfit train FA-MPJPE {report.fa_mpjpe:.3f} mm (threshold {overfit_threshold(train_records):.3f} mm)")
    print(f"trained {result.steps} steps (procrustes {mode}); final train loss {last.get('train_loss')}; "
          f"best val FA-MPJPE {result.best_val_fa_mpjpe}")
    return 0


def _predictor(args, config: RunConfig):
    if args.predictions:
        pred_dir = Path(args.predictions)

        def from_files(record, kp):
            sk, units = load_skeleton(pred_dir / f"{record.sequence_id}_canonical.json")
            return sk.joints

        return from_files
    if args.checkpoint == ORACLE:
        return ground_truth_predictor
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint or --predictions")
    model, _ = load_checkpoint(args.checkpoint)
    return model_predictor(model, config.eval.clip_len)


def cmd_eval(args, config: RunConfig) -> int:
    out = out_dir(args, config, "eval")
    records, manifest = load_dataset(dataset_dir(args, config))
    predictor = _predictor(args, config)
    seed = config.eval_seed()
    scenarios = args.scenario or config.eval.scenarios
    config.save(out / "config.json")
    for text in scenarios:
        scenario = Scenario.parse(text)
        chosen = select_records(records, manifest, scenario)
        report = evaluate(predictor, chosen, scenario, seed)
        stem = "report_" + str(scenario).replace(":", "_")
        report.save(out / f"{stem}.json")
        (out / f"{stem}.csv").write_text(report.to_csv())
        print(f"{scenario}: FA-MPJPE {report.fa_mpjpe:.3f} mm, SA-MPJPE {report.sa_mpjpe:.3f} mm, "
              f"SA-MPVE {report.sa_mpve:.3f} mm/frame ({report.counts['sequences']} sequences)")
    if args.occlusion_sweep:
        fractions = list(config.eval.occlusion_sweep)
        test = select_records(records, manifest, Scenario("noisy"))
        reports = occlusion_sweep(predictor, test, fractions, seed)
        write_curve_csv(out / "occlusion_curve.csv", fractions, reports)
        write_curve_svg(out / "occlusion_curve.svg", fractions, reports)
        for f, r in zip(fractions, reports):
            print(f"occluded:{f:g}: FA-MPJPE {r.fa_mpjpe:.3f} mm")
    return 0


def cmd_lift(args, config: RunConfig) -> int:
    out = out_dir(args, config, "lift")
    if args.checkpoint is None or args.sequence is None:
        raise ConfigError("lift needs --checkpoint and --sequence")
    record = SequenceRecord.load(args.sequence)
    if args.checkpoint == ORACLE:
        pred = ground_truth_predictor(record, record.keypoints)
    else:
        model, _ = load_checkpoint(args.checkpoint)
        pred = model_predictor(model, config.eval.clip_len)(record, record.keypoints)
    sk = record.skeleton
    canon = SkeletonSequence3D(pred, sk.chain, sk.category, sk.sequence_id, sk.fps)
    path = out / f"{sk.sequence_id}_canonical.json"
    path.write_text(json.dumps(skeleton_to_dict(canon, "canonical")) + "\n")
    aligned, _, _ = align_prediction(sk.joints, pred)
    al = SkeletonSequence3D(aligned, sk.chain, sk.category, sk.sequence_id, sk.fps)
    (out / f"{sk.sequence_id}_aligned.json").write_text(json.dumps(skeleton_to_dict(al, "mm")) + "\n")
    m = sequence_metrics(sk.joints, pred)
    print(f"lifted {sk.sequence_id} ({sk.num_frames} frames, {sk.num_joints} joints) -> {path}; "
          f"FA-MPJPE {m['fa_mpjpe']:.3f} mm")
    return 0


def gradcheck_batch(seed: int, T: int = 4, J: int = 5, B: int = 2):
    """Random tiny batch for the finite-difference suite."""
    rng = np.random.default_rng(seed)
    items = []
    for b in range(B):
        y = rng.normal(size=(T, J, 3))
        parent = [-1] + [int(rng.integers(j)) for j in range(1, J)]
        chain = KinematicChain.from_positions(parent, y[0])
        items.append((rng.uniform(-1, 1, (T, J, 2)), np.ones((T, J)), y, chain.adjacency, f"gc_{b}"))
    return make_batch(items, torch.float64)


def run_gradcheck(seed: int, train_config: TrainConfig | None = None, corrupt: str | None = None):
    """Finite-difference suite on the tiny model plus the IK objective.

    Returns:
        ``(model_entries, ik_entries)``
    """
    mc = ModelConfig(feature_dim=8, heads=2, motion_layers=1, space_layers=1, window_alpha=2,
                     init_seed=seed, rff_seed=seed, dtype="float64")
    model = LiftingModel(mc)
    batch = gradcheck_batch(seed)
    tc = train_config or TrainConfig()
    entries = gradient_check(model, batch, tc, n_coords=30, h=1e-4, seed=seed, corrupt=corrupt)

    rng = np.random.default_rng(seed + 1)
    J, T = 6, 5
    parent = [-1] + [int(rng.integers(j)) for j in range(1, J)]
    chain = KinematicChain(tuple(parent), rng.normal(size=(J, 3)))
    theta = rng.normal(scale=0.5, size=(T, J, 3))
    root = rng.normal(size=(T, 3))
    target = rng.normal(size=(T, J, 3))
    ik_entries = ik_gradient_check(chain, theta, root, target, n_coords=30, seed=seed)
    return entries, ik_entries


def cmd_gradcheck(args, config: RunConfig) -> int:
    out = out_dir(args, config, "gradcheck")
    entries, ik_entries = run_gradcheck(config.seed, config.train, args.corrupt_tensor)
    failed = []
    lines = []
    for label, group, tol in (("model", entries, GRADCHECK_TOL), ("ik", ik_entries, IK_GRADCHECK_TOL)):
        for e in group:
            ok = e.rel_error < tol
            lines.append({"suite": label, "tensor": e.tensor, "index": list(e.index), "analytic": e.analytic,
                          "numeric": e.numeric, "rel_error": e.rel_error, "pass": ok})
            print(f"{'PASS' if ok else 'FAIL'} {label} {e.tensor}{list(e.index)} rel_err={e.rel_error:.3e}")
            if not ok:
                failed.append(e.tensor)
    config.save(out / "config.json")
    (out / "gradcheck.json").write_text(json.dumps({"seed": config.seed, "entries": lines}, indent=1) + "\n")
    if failed:
        print(f"gradient check FAILED for tensors: {sorted(set(failed))}")
        return 1
    print(f"gradient check passed ({len(lines)} coordinates)")
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="animlift", description="Category-agnostic 2D-to-3D skeleton lifting.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("dataset-gen", parents=[common], help="synthesize a dataset and split manifest")

    p = sub.add_parser("train", parents=[common], help="train a lifting model")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--procrustes", choices=("on", "off"), help="Procrustes-aligned loss (default from config)")
    p.add_argument("--resume", help="resume from a last.json checkpoint")
    p.add_argument("--overfit", action="store_true", help="overfit two toy sequences with a tiny model")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", help=f"checkpoint file, or '{ORACLE}' for the ground-truth stub")
    p.add_argument("--predictions", help="directory of *_canonical.json files from `lift`")
    p.add_argument("--scenario", action="append",
                   help="clean | noisy | occluded:<f> | holdout:<category> | unseen_rig (repeatable)")
    p.add_argument("--occlusion-sweep", action="store_true", help="write the error-vs-occlusion curve")

    p = sub.add_parser("lift", parents=[common], help="lift one sequence file to 3D")
    p.add_argument("--checkpoint", help=f"checkpoint file, or '{ORACLE}'")
    p.add_argument("--sequence", help="sequence JSON file")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--corrupt-tensor", help=argparse.SUPPRESS)
    return parser


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "lift": cmd_lift,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except LiftError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return InvalidInput.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
