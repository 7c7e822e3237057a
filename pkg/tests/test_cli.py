import json
import subprocess
import sys

import numpy as np
import pytest

from animlift.cli import load_skeleton, main
from animlift.dataset import DEFAULT_TEMPLATES, SequenceRecord, load_dataset, toy_record
from animlift.metrics import MetricReport
from animlift.model import LiftingModel, ModelConfig, save_checkpoint

SMALL_RUN = {
    "seed": 3,
    "dataset": {"templates": [DEFAULT_TEMPLATES[0].to_dict(), DEFAULT_TEMPLATES[2].to_dict()],
                "sequences_per_category": 3, "frames": 10},
    "ik": {"max_iters": 30},
    "model": {"feature_dim": 16, "heads": 2, "motion_layers": 1, "space_layers": 1, "window_alpha": 2,
              "dtype": "float32"},
    "train": {"max_steps": 4, "batch_sequences": 2, "frames_per_clip": 6, "learning_rate": 1e-3},
    "eval": {"scenarios": ["clean"]},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.json").write_text(json.dumps(SMALL_RUN))
    assert main(["dataset-gen", "--config", str(root / "run.json"), "--out", str(root / "data")]) == 0
    return root


def run(workdir, *argv):
    return main([*argv, "--config", str(workdir / "run.json")])


def test_help_and_usage_errors():
    ok = subprocess.run([sys.executable, "-m", "animlift", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "dataset-gen" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "animlift", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2


def test_config_errors_exit_2(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lr": 1}}))
    assert main(["gradcheck", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2
    assert "lr" in capsys.readouterr().err
    assert main(["gradcheck", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{\n  nope")
    assert main(["gradcheck", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--out", str(tmp_path), "--dataset", str(tmp_path / "nowhere")]) == 2


def test_dataset_gen_split_and_echo(workdir):
    records, manifest = load_dataset(workdir / "data")
    assert len(records) == 6
    for cat in ("dog", "chicken"):
        assert len(manifest.train_sequence_ids[cat]) == 2 and len(manifest.test_sequence_ids[cat]) == 1
    echoed = json.loads((workdir / "data" / "config.json").read_text())
    assert echoed["seed"] == 3 and echoed["dataset"]["frames"] == 10


def test_dataset_gen_is_byte_identical(workdir, tmp_path):
    assert run(workdir, "dataset-gen", "--out", str(tmp_path / "again")) == 0
    for f in sorted((workdir / "data").rglob("*.json")):
        rel = f.relative_to(workdir / "data")
        assert (tmp_path / "again" / rel).read_bytes() == f.read_bytes(), rel


def test_output_dir_from_environment(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("ANIMLIFT_OUT", str(tmp_path / "envroot"))
    assert run(workdir, "gradcheck") == 0
    assert (tmp_path / "envroot" / "gradcheck" / "gradcheck.json").exists()


def test_gradcheck_pass_and_corruption(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path / "a")]) == 0
    doc = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    assert all(e["pass"] for e in doc["entries"]) and len(doc["entries"]) == 60
    assert main(["gradcheck", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    other = json.loads((tmp_path / "b" / "gradcheck.json").read_text())
    assert [e["index"] for e in other["entries"]] != [e["index"] for e in doc["entries"]]
    capsys.readouterr()
    assert main(["gradcheck", "--out", str(tmp_path / "c"), "--corrupt-tensor", "decoder.out.weight"]) == 1
    assert "decoder.out.weight" in capsys.readouterr().out


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "train"
    assert run(workdir, "train", "--dataset", str(workdir / "data"), "--out", str(out), "--procrustes", "off") == 0
    return out


def test_train_outputs_and_ablation_flag(trained):
    rows = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
    assert rows and all(r["procrustes_loss"] is False for r in rows)
    assert {"val_fa_mpjpe", "val_sa_mpjpe", "val_sa_mpve"} <= set(rows[-1])
    echoed = json.loads((trained / "config.json").read_text())
    assert echoed["train"]["procrustes_loss"] is False
    assert (trained / "best.json").exists() and (trained / "last.json").exists()


def test_train_resume_matches_uninterrupted(workdir, tmp_path):
    cfg = dict(SMALL_RUN, train=dict(SMALL_RUN["train"], max_steps=6))
    (tmp_path / "six.json").write_text(json.dumps(cfg))
    data = str(workdir / "data")
    assert main(["train", "--config", str(tmp_path / "six.json"), "--dataset", data, "--out", str(tmp_path / "full")]) == 0
    assert run(workdir, "train", "--dataset", data, "--out", str(tmp_path / "part")) == 0
    assert main(["train", "--config", str(tmp_path / "six.json"), "--dataset", data, "--out", str(tmp_path / "part"),
                 "--resume", str(tmp_path / "part" / "last.json")]) == 0
    full = [json.loads(x)["train_loss"] for x in (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()]
    part = [json.loads(x)["train_loss"] for x in (tmp_path / "part" / "train_log.jsonl").read_text().splitlines()]
    np.testing.assert_allclose(part, full, rtol=0, atol=1e-6)


def test_eval_oracle_reports_zero_and_sweep(workdir, tmp_path):
    out = tmp_path / "ev"
    assert run(workdir, "eval", "--dataset", str(workdir / "data"), "--checkpoint", "ground-truth", "--out", str(out),
               "--scenario", "clean", "--scenario", "holdout:dog", "--occlusion-sweep") == 0
    for name in ("report_clean.json", "report_holdout_dog.json"):
        rep = MetricReport.load(out / name)
        assert max(rep.fa_mpjpe, rep.sa_mpjpe, rep.sa_mpve) < 1e-9
    assert MetricReport.load(out / "report_holdout_dog.json").counts["sequences"] == 3
    curve = (out / "occlusion_curve.csv").read_text().splitlines()
    assert len(curve) == 5 and curve[0].startswith("occlusion")
    assert (out / "occlusion_curve.svg").exists()


def test_eval_is_deterministic(workdir, trained, tmp_path):
    for d in ("a", "b"):
        assert run(workdir, "eval", "--dataset", str(workdir / "data"), "--checkpoint", str(trained / "best.json"),
                   "--out", str(tmp_path / d), "--scenario", "occluded:0.3") == 0
    name = "report_occluded_0.3.json"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_lift_then_eval_equals_direct_eval(workdir, trained, tmp_path):
    records, manifest = load_dataset(workdir / "data")
    ckpt = str(trained / "best.json")
    for sid in manifest.test_ids:
        assert run(workdir, "lift", "--checkpoint", ckpt, "--sequence", str(workdir / "data" / "sequences" / f"{sid}.json"),
                   "--out", str(tmp_path / "lifted")) == 0
    sk, units = load_skeleton(tmp_path / "lifted" / f"{manifest.test_ids[0]}_canonical.json")
    assert units == "canonical" and sk.joints.shape[1] == records[manifest.test_ids[0]].num_joints
    assert (tmp_path / "lifted" / f"{manifest.test_ids[0]}_aligned.json").exists()
    args = ["--dataset", str(workdir / "data"), "--scenario", "noisy"]
    assert run(workdir, "eval", *args, "--checkpoint", ckpt, "--out", str(tmp_path / "direct")) == 0
    assert run(workdir, "eval", *args, "--predictions", str(tmp_path / "lifted"), "--out", str(tmp_path / "files")) == 0
    direct = MetricReport.load(tmp_path / "direct" / "report_noisy.json")
    files = MetricReport.load(tmp_path / "files" / "report_noisy.json")
    for sid, row in direct.per_sequence.items():
        for k in ("fa_mpjpe", "sa_mpjpe", "sa_mpve"):
            assert files.per_sequence[sid][k] == pytest.approx(row[k], abs=1e-9)


def test_lift_joint_limit(tmp_path):
    ckpt = tmp_path / "m.json"
    save_checkpoint(ckpt, LiftingModel(ModelConfig(feature_dim=8, heads=2, motion_layers=1, space_layers=1)))
    for J, code in ((29, 0), (30, 2)):
        path = tmp_path / f"seq{J}.json"
        toy_record(J, 4, seed=J).save(path)
        assert main(["lift", "--checkpoint", str(ckpt), "--sequence", str(path), "--out", str(tmp_path / "o")]) == code


def test_lift_reports_format_errors(tmp_path, capsys):
    good = toy_record(5, 4).to_dict()
    del good["presence"]
    (tmp_path / "s.json").write_text(json.dumps(good))
    assert main(["lift", "--checkpoint", "ground-truth", "--sequence", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "o")]) == 2
    assert "presence" in capsys.readouterr().err
    SequenceRecord.from_dict(toy_record(5, 4).to_dict())


def test_overfit_preset_runs(tmp_path, capsys, monkeypatch):
    import animlift.cli as cli

    monkeypatch.setitem(cli.OVERFIT_PRESET, "train", dict(cli.OVERFIT_PRESET["train"], max_steps=5))
    assert main(["train", "--overfit", "--out", str(tmp_path)]) == 0
    assert "overfit train FA-MPJPE" in capsys.readouterr().out
