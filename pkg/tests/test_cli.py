import json

import numpy as np
import pytest

from unfoldldm.cli import main
from unfoldldm.config import ABLATIONS, RunConfig
from unfoldldm.imageio import read_image, write_image

from conftest import tiny_config


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """A tiny run config on disk with data and output dirs under ``tmp_path``."""
    monkeypatch.delenv("UNFOLDLDM_DATA_DIR", raising=False)
    monkeypatch.delenv("UNFOLDLDM_OUT_DIR", raising=False)
    cfg = tiny_config(steps1=2, steps2=2, n_train=4, n_test=3, rollout_every=1,
                      data_dir=str(tmp_path / "data"), out_dir=str(tmp_path / "out"))
    cfg.save(tmp_path / "run.cfg")
    return tmp_path, ["--config", str(tmp_path / "run.cfg")]


def test_synth_is_reproducible_and_counts_match(workspace, capsys):
    root, flags = workspace
    assert main(["synth", *flags]) == 0
    manifest = json.loads((root / "data" / "train" / "manifest.json").read_text())
    assert manifest["count"] == 4 and len(manifest["pairs"]) == 4
    first = (root / "data" / "train" / "degraded" / "00000.png").read_bytes()
    assert main(["synth", *flags, "--data-dir", str(root / "again")]) == 0
    assert (root / "again" / "train" / "degraded" / "00000.png").read_bytes() == first
    assert json.loads((root / "again" / "test" / "manifest.json").read_text())["count"] == 3


def test_full_pipeline_writes_reports_and_figures(workspace):
    root, flags = workspace
    out = root / "out"
    assert main(["synth", *flags, "--format", "pgm"]) == 0
    assert main(["train", "--phase", "1", *flags]) == 0
    assert main(["train", "--phase", "2", *flags]) == 0
    for name in ("phase1.ckpt", "phase2.ckpt", "phase1_loss.csv", "phase2_loss.csv", "rollout.csv",
                 "phase1_loss.png", "phase2_loss.png", "config.txt", "phase2_summary.json"):
        assert (out / name).exists(), name
    assert RunConfig.load(out / "config.txt") == RunConfig.load(root / "run.cfg")

    assert main(["eval", *flags]) == 0
    summary = json.loads((out / "eval.json").read_text())
    assert summary["count"] == 3 and len(summary["stages"]) == 3
    assert (out / "eval.csv").exists() and (out / "eval_stages.png").exists()

    img = root / "in.pgm"
    write_image(img, np.random.default_rng(0).random((1, 13, 16)))
    assert main(["infer", "--input", str(img), "--output", str(root / "x.png"),
                 "--trace-dir", str(root / "trace"), *flags]) == 0
    assert read_image(root / "x.png").shape == (1, 13, 16)
    assert (root / "trace" / "stage3_x_k.pgm").exists() and (root / "trace" / "trace.png").exists()


def test_eval_report_is_reproducible(workspace):
    root, flags = workspace
    main(["synth", *flags])
    main(["train", "--phase", "1", *flags])
    main(["train", "--phase", "2", *flags])
    main(["eval", *flags])
    first = (root / "out" / "eval.csv").read_bytes()
    main(["eval", *flags])
    assert (root / "out" / "eval.csv").read_bytes() == first


def test_missing_checkpoint_is_failure(workspace, capsys):
    _, flags = workspace
    assert main(["synth", *flags]) == 0
    assert main(["train", "--phase", "2", *flags]) == 1
    assert "phase 1 checkpoint" in capsys.readouterr().err
    assert main(["eval", *flags]) == 1


def test_config_errors_exit_with_two(workspace, tmp_path, capsys):
    _, flags = workspace
    assert main(["synth", *flags, "--image-size", "30"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("K = \"x\"\n")
    assert main(["synth", "--config", str(bad)]) == 2
    assert main(["synth", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "config error" in capsys.readouterr().err


def test_env_overrides_config_paths_and_flags_win(workspace, monkeypatch):
    root, flags = workspace
    monkeypatch.setenv("UNFOLDLDM_DATA_DIR", str(root / "from_env"))
    assert main(["synth", *flags]) == 0
    assert (root / "from_env" / "train" / "manifest.json").exists()
    assert main(["synth", *flags, "--data-dir", str(root / "from_flag")]) == 0
    assert (root / "from_flag" / "test" / "manifest.json").exists()


def test_gradcheck_passes_and_reports(workspace, capsys):
    root, flags = workspace
    assert main(["gradcheck", "--suite", "matmul", "--suite", "gelu", *flags]) == 0
    text = capsys.readouterr().out
    assert "PASS" in text and "matmul" in text and "2/2 suites passed" in text
    report = json.loads((root / "out" / "gradcheck.json").read_text())
    assert [r["suite"] for r in report["suites"]] == ["matmul", "gelu"]
    assert all("max_rel_error" in r for r in report["suites"])
    assert (root / "out" / "gradcheck.png").exists()


@pytest.mark.parametrize("kind,suite", [("matmul", "matmul"), ("gelu", "gelu"), ("softmax", "softmax")])
def test_gradcheck_catches_sign_flip(workspace, capsys, kind, suite):
    root, flags = workspace
    assert main(["gradcheck", "--suite", suite, "--flip", kind, *flags]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert json.loads((root / "out" / "gradcheck.json").read_text())["failed"] == [suite]


def test_gradcheck_unknown_suite(workspace):
    _, flags = workspace
    assert main(["gradcheck", "--suite", "nonsense", *flags]) == 2


def test_ablation_table_covers_requested_variants(workspace):
    root, flags = workspace
    main(["synth", *flags])
    assert main(["ablate", "--variants", "full", "no_isda", "no_drldm", *flags]) == 0
    rows = json.loads((root / "out" / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["full", "no_isda", "no_drldm"]
    assert (root / "out" / "ablation.png").exists()
    # the full row equals a plain run with no switches
    main(["train", "--phase", "1", *flags, "--out-dir", str(root / "plain")])
    main(["train", "--phase", "2", *flags, "--out-dir", str(root / "plain")])
    main(["eval", *flags, "--out-dir", str(root / "plain"), "--checkpoint", str(root / "plain" / "phase2.ckpt")])
    plain = json.loads((root / "plain" / "eval.json").read_text())
    assert rows[0]["psnr"] == pytest.approx(plain["mean_psnr_out"], abs=1e-9)


def test_ablation_switch_set_is_fixed():
    assert ABLATIONS == ("no_x_hat", "no_x_tilde", "no_seqmix", "no_isda", "no_dra", "no_pdr", "no_drldm")


def test_ablation_rejects_unknown_switch(workspace):
    _, flags = workspace
    main(["synth", *flags])
    assert main(["ablate", "--variants", "no_magic", *flags]) == 2
