import json
import os
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from mritraj import pipeline
from mritraj.analysis import MseReport
from mritraj.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main, parse_horizons
from mritraj.dataio import read_manifest

TINY = {
    "seed": 3,
    "phantom": {"grid_size": 16, "cohort_size": 12, "statuses": [[0, 1], [5, 1]], "scans_per_subject": [2, 4]},
    "model": {"latent_dim": 2, "channels": [4, 4, 8, 8]},
    "train": {"max_epochs": 2, "patience": 1, "steps_per_epoch": 2, "learning_rate": 0.001},
    "vae": {"epochs": 1, "channels": [4, 4, 8, 8], "latent_dim": 2},
    "evaluation": {"holdout_per_category": 2, "val_per_category": 1, "horizons": [0, 1, 2, 3], "flow_iters": 20},
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    run = root / "run"
    common = ["--config", str(cfg), "--run-dir", str(run)]
    codes = {}
    for cmd in ("phantom-gen", "register", "prep-pairs", "train", "baselines", "evaluate", "flowviz", "report"):
        codes[cmd] = main([cmd, *common])
    return cfg, run, codes


def test_pipeline_stages_succeed(tiny_run):
    _, run, codes = tiny_run
    assert all(c == EXIT_OK for c in codes.values()), codes
    for rel in ("config.effective.yaml", "cohort/manifest.csv", "registered/manifest.csv", "data/split.json",
                "data/pairs_train.csv", "data/standardizer.json", "train/best.npz", "baselines/vae.npz",
                "baselines/lme.json", "eval/mse_report.csv", "eval/summary.json", "flow/flow_summary.json",
                "report.md", "logs/train.log"):
        assert (run / rel).exists(), rel
    assert not (run / ".lock").exists()


def test_registered_manifest_feeds_next_stage(tiny_run):
    _, run, _ = tiny_run
    cohort = read_manifest(run / "cohort" / "manifest.csv")
    reg = read_manifest(run / "registered" / "manifest.csv")
    assert len(reg) == len(cohort)
    assert all(Path(r.path).exists() for r in reg)


def test_report_has_all_five_methods(tiny_run):
    _, run, _ = tiny_run
    rep = MseReport.read_csv(run / "eval" / "mse_report.csv")
    assert set(rep.methods) == {"cvae", "vae_lme", "svd10", "svd100", "identity"}
    assert set(rep.rois) == {"whole", "ventricles", "hippocampus"}
    text = (run / "report.md").read_text()
    for m in rep.methods:
        assert m in text


def test_trajectory_writes_ten_volumes(tiny_run, tmp_path):
    cfg, run, _ = tiny_run
    rec = read_manifest(run / "cohort" / "manifest.csv")[0]
    out = tmp_path / "traj"
    code = main(["trajectory", "--config", str(cfg), "--run-dir", str(run), "--base", str(rec.path),
                 "--age", str(rec.age_at_scan), "--status", "5", "--horizons", "1..10", "--out-dir", str(out)])
    assert code == EXIT_OK
    index = json.loads((out / "index.json").read_text())
    assert len(index["horizons"]) == 10
    assert sorted(p.name for p in out.iterdir() if p.name != "index.json") == sorted(index["horizons"].values())


def test_predict_and_classify(tiny_run, tmp_path):
    cfg, run, _ = tiny_run
    recs = read_manifest(run / "cohort" / "manifest.csv")
    a, b = [r for r in recs if r.subject_id == recs[0].subject_id][:2]
    common = ["--config", str(cfg), "--run-dir", str(run), "--base", str(a.path), "--age", str(a.age_at_scan)]
    assert main(["predict", *common, "--status", "0", "--delta-t", "2", "--out", str(tmp_path / "p.nii.gz")]) == 0
    assert (tmp_path / "p.nii.gz").exists()
    out = tmp_path / "c.json"
    assert main(["classify", *common, "--target", str(b.path), "--delta-t", str(b.age_at_scan - a.age_at_scan),
                 "--out", str(out)]) == 0
    res = json.loads(out.read_text())
    assert res["hypotheses"] == [0, 5]
    assert 0.0 <= res["p_null"] <= 1.0


def test_classify_without_target_is_usage_error(tiny_run, capsys):
    cfg, run, _ = tiny_run
    with pytest.raises(SystemExit) as exc:
        main(["classify", "--config", str(cfg), "--base", "x.nii.gz", "--age", "70", "--delta-t", "1"])
    assert exc.value.code == 2
    assert "--target" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"batch_size": 0}}))
    assert main(["prep-pairs", "--config", str(bad), "--run-dir", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["prep-pairs", "--run-dir", str(tmp_path / "r"), "--set", "train.nope=1"]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    assert main(["prep-pairs", "--run-dir", str(tmp_path / "empty")]) == EXIT_DATA


def test_locked_run_dir(tmp_path):
    run = tmp_path / "locked"
    with pipeline.RunLock(run):
        assert main(["prep-pairs", "--run-dir", str(run)]) == EXIT_DATA
        assert (run / ".lock").read_text() == str(os.getpid())


def test_stale_lock_taken_over(tmp_path):
    run = tmp_path / "stale"
    run.mkdir()
    proc = subprocess.run([sys.executable, "-c", "import os; print(os.getpid())"], capture_output=True, text=True)
    (run / ".lock").write_text(proc.stdout.strip())
    with pipeline.RunLock(run):
        assert (run / ".lock").read_text() == str(os.getpid())
    assert not (run / ".lock").exists()


def test_schema_subcommand(capsys):
    assert main(["schema"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["additionalProperties"] is False


def test_parse_horizons():
    assert parse_horizons("1..10") == [float(i) for i in range(1, 11)]
    assert parse_horizons("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert parse_horizons("2, 5") == [2.0, 5.0]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mritraj", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "trajectory" in proc.stdout
