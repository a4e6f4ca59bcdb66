import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from countervox.cli import main
from countervox.grid import roi_volume_mm3
from countervox.volio import read_volume

REPO = Path(__file__).resolve().parent.parent


def run(*argv) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    code = run("phantom", "--n", "4", "--dims", "24,24,24", "--seed", "7",
               "--out", str(out))
    assert code == 0
    return out


def test_phantom_empty_manifest(tmp_path):
    out = tmp_path / "empty"
    assert run("phantom", "--n", "0", "--out", str(out)) == 0
    manifest = (out / "manifest.csv").read_text().strip().splitlines()
    assert len(manifest) == 1  # header only
    assert (out / "phantom_report.json").exists()


def test_phantom_seed_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("phantom", "--n", "3", "--dims", "16,16,16", "--seed", "11",
               "--gt-scm", str(REPO / "configs/example_gt_small.json"),
               "--out", str(a)) == 0
    assert run("phantom", "--n", "3", "--dims", "16,16,16", "--seed", "11",
               "--gt-scm", str(REPO / "configs/example_gt_small.json"),
               "--out", str(b)) == 0
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    assert (a / "s0000_volume.nii").read_bytes() == (b / "s0000_volume.nii").read_bytes()


def test_phantom_writes_volumes(cohort_dir):
    vol = read_volume(cohort_dir / "s0000_volume.nii")
    labels = read_volume(cohort_dir / "s0000_labels.nii")
    assert vol.dims == (24, 24, 24)
    assert labels.num_rois == 6


def test_scm_fit_and_cf_round_trip(cohort_dir, tmp_path):
    fit_dir = tmp_path / "fit"
    assert run("scm", "fit", "--cohort", str(cohort_dir / "manifest.csv"),
               "--out", str(fit_dir)) == 0
    report = json.loads((fit_dir / "scm_fit_report.json").read_text())
    assert report["n_subjects"] == 4
    assert (fit_dir / "scm_model.json").exists()


def test_scm_cf_shipped_example(tmp_path):
    out = tmp_path / "cf"
    code = run("scm", "cf",
               "--model", str(REPO / "configs/example_scm.json"),
               "--obs", str(REPO / "configs/example_obs.json"),
               "--do", "a=5",
               "--out", str(out))
    assert code == 0
    doc = json.loads((out / "scm_cf_report.json").read_text())
    assert doc["counterfactual"]["v"] == pytest.approx(12.0, abs=1e-9)
    assert doc["counterfactual"]["a"] == 5.0


def test_mask_null_edit(cohort_dir, tmp_path):
    labels = read_volume(cohort_dir / "s0000_labels.nii")
    target = roi_volume_mm3(labels, 3)
    out = tmp_path / "mask0"
    assert run("mask", "--labels", str(cohort_dir / "s0000_labels.nii"),
               "--roi", "3", "--target-mm3", str(target), "--out", str(out)) == 0
    doc = json.loads((out / "mask_report.json").read_text())
    assert doc["d"] == 0
    assert doc["plan"]["achieved"] == 0
    edited = read_volume(out / "edited_labels.nii")
    assert np.array_equal(edited.labels, labels.labels)


def test_mask_grow(cohort_dir, tmp_path):
    labels = read_volume(cohort_dir / "s0000_labels.nii")
    target = roi_volume_mm3(labels, 3) + 20.0
    out = tmp_path / "maskg"
    assert run("mask", "--labels", str(cohort_dir / "s0000_labels.nii"),
               "--roi", "3", "--target-mm3", str(target), "--out", str(out)) == 0
    doc = json.loads((out / "mask_report.json").read_text())
    assert doc["d"] == 20 and doc["plan"]["achieved"] == 20


def test_pipeline_command_and_determinism(cohort_dir, tmp_path):
    fit_dir = tmp_path / "fit"
    assert run("scm", "fit", "--cohort", str(cohort_dir / "manifest.csv"),
               "--out", str(fit_dir)) == 0
    config = {
        "manifest": str(cohort_dir / "manifest.csv"),
        "model": str(fit_dir / "scm_model.json"),
        "denoiser": {"kind": "oracle", "mean": 0.4, "var": 0.3},
        "decoder": {"kind": "latent-oracle", "var": 1e-6},
        "schedule": {"kind": "linear", "T": 1000},
        "encode_factor": 2,
        "substeps": 50,
        "tau": 0.8,
        "guidance_w": 2.0,
        "intervention": {"diagnosis": 1.0},
        "subjects": ["s0000", "s0001"],
        "seed": 3,
    }
    cfg_path = tmp_path / "pipe.json"
    cfg_path.write_text(json.dumps(config))
    out_a, out_b = tmp_path / "runA", tmp_path / "runB"
    assert run("pipeline", "--config", str(cfg_path), "--out", str(out_a)) == 0
    assert run("pipeline", "--config", str(cfg_path), "--out", str(out_b)) == 0
    for name in ("s0000_cf_volume.nii", "s0000_cf_labels.nii", "s0001_cf_volume.nii"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    report = json.loads((out_a / "pipeline_report.json").read_text())
    assert report["n_failures"] == 0
    subject = json.loads((out_a / "s0000_cf_report.json").read_text())
    assert subject["counterfactual"]["diagnosis"] == 1.0


def test_eval_command(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["subject_id,group,visit,supratentorial,roi_1"]
    for g, shift in (("control", 0.0), ("case", 3.0)):
        for i in range(40):
            rows.append(f"{g}{i},{g},0,{50 + rng.standard_normal():.6f},"
                        f"{100 + shift + rng.standard_normal():.6f}")
    study_csv = tmp_path / "study.csv"
    study_csv.write_text("\n".join(rows) + "\n")
    out = tmp_path / "eval"
    assert run("eval", "--study", str(study_csv), "--rois", "roi_1",
               "--comparisons", "control:case", "--out", str(out)) == 0
    doc = json.loads((out / "effect_report.json").read_text())
    assert doc["entries"][0]["significant"] is True
    assert (out / "effect_grid.csv").exists()


def test_exit_codes(tmp_path):
    assert run("phantom", "--n", "2", "--badflag", "--out", str(tmp_path / "x")) == 1
    assert run("nosuchcommand") == 1
    assert run("scm", "fit", "--cohort", "/nonexistent.csv", "--out", str(tmp_path / "y")) == 2
    assert run("mask", "--labels", "/nonexistent.nii", "--roi", "3",
               "--target-mm3", "10", "--out", str(tmp_path / "z")) == 2
    # cyclic skeleton is a usage error
    bad = tmp_path / "cyclic.json"
    bad.write_text(json.dumps({"nodes": ["a", "b"], "edges": [["a", "b"], ["b", "a"]]}))
    manifest = tmp_path / "m.csv"
    manifest.write_text("id,group,age,sex,diagnosis,roi_1\ns0,control,40,0,0,100\n")
    assert run("scm", "fit", "--cohort", str(manifest), "--skeleton", str(bad),
               "--out", str(tmp_path / "w")) == 1


def test_numerical_failure_exit_code(tmp_path):
    # empty cohort triggers a numerical (fit) failure: exit 3
    manifest = tmp_path / "empty.csv"
    manifest.write_text("id,group,age,sex,diagnosis,roi_1\n")
    assert run("scm", "fit", "--cohort", str(manifest), "--out", str(tmp_path / "f")) == 3


def test_help_for_every_subcommand():
    for argv in (["--help"], ["phantom", "--help"], ["scm", "--help"],
                 ["scm", "fit", "--help"], ["scm", "cf", "--help"],
                 ["mask", "--help"], ["diffuse", "--help"],
                 ["diffuse", "train", "--help"], ["diffuse", "sample", "--help"],
                 ["diffuse", "invert", "--help"], ["pipeline", "--help"],
                 ["eval", "--help"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 0


def test_entry_point_installed():
    proc = subprocess.run([sys.executable, "-m", "countervox.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "phantom" in proc.stdout


def test_out_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COUNTERVOX_OUT", str(tmp_path))
    assert run("phantom", "--n", "0", "--out", "nested/run") == 0
    assert (tmp_path / "nested/run/manifest.csv").exists()


def test_diffuse_cli_round_trip(tmp_path):
    data = tmp_path / "data"
    assert run("phantom", "--n", "3", "--dims", "16,16,16", "--seed", "2",
               "--gt-scm", str(REPO / "configs/example_gt_small.json"),
               "--out", str(data)) == 0
    model_dir = tmp_path / "model"
    assert run("diffuse", "train", "--data", str(data), "--steps", "60",
               "--T", "100", "--out", str(model_dir)) == 0
    assert run("diffuse", "sample", "--model", str(model_dir / "denoiser"),
               "--T", "100", "--substeps", "10", "--n", "1", "--seed", "1",
               "--out", str(tmp_path / "samples")) == 0
    assert (tmp_path / "samples/sample_0000.nii").exists()
    assert run("diffuse", "invert", "--model", str(model_dir / "denoiser"),
               "--T", "100", "--substeps", "10",
               "--volume", str(data / "s0000_volume.nii"),
               "--out", str(tmp_path / "inv")) == 0
    seq = np.load(tmp_path / "inv/inversion.npz")
    assert seq["sequence"].shape[0] == 11
