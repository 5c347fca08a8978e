import json
import os
import subprocess

import numpy as np
import pytest

import forgetdissect as fd


def tiny_config(root):
    c = fd.default_config()
    c["output_root"] = str(root)
    c["seed"] = 3
    c["dataset"]["image_size"] = 16
    c["dataset"]["samples_per_class"] = 10
    c["split_ratios"] = [0.6, 0.2, 0.2]
    c["train_base"] = {"epochs": 12, "learning_rate": 0.1, "batch_size": 8}
    c["train_incremental"] = {"epochs": 1, "learning_rate": 0.02, "batch_size": 8}
    c["schedule"] = {"base_classes": [0, 1, 2, 3], "incremental_classes": [4, 5, 6, 7]}
    c["pda"]["num_samples"] = 2
    c["pda"]["laplace_n"] = 20
    c["dissect"]["k_per_class"] = 1
    c["policies"] = ["fine-tune", "critical-freeze"]
    c["decoder_components"] = ["linear"]
    return c


def test_iou_and_best_match():
    a = np.zeros((4, 4), dtype=np.uint8)
    b = np.zeros((4, 4), dtype=np.uint8)
    a[0, :2] = 1
    b[0, 1:3] = 1
    assert fd.iou(a, b) == pytest.approx(1 / 3)
    assert fd.iou(a, a) == 1.0
    assert fd.iou(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0
    assert fd.best_match([b, a], a) == (1, 1.0)
    with pytest.raises(fd.ForgetDissectError) as err:
        fd.iou(a, np.zeros((3, 3)))
    assert fd.error_kind(err.value) == "input"


def test_fragile_block_and_text_metrics():
    assert fd.fragile_block([1.0, 0.9, 0.5, 0.45]) == 3
    assert fd.fragile_block([1.0, 1.0, 1.0]) is None
    assert fd.bleu([1, 2, 3, 4], [[1, 2, 3, 4]], 1) == pytest.approx(1.0)
    assert fd.rouge_l([1, 2, 3], [[1, 2, 3]]) == pytest.approx(1.0)
    assert fd.rouge_l([1, 2], [[3, 4]]) == 0.0


def test_config_validation():
    c = fd.default_config()
    assert fd.normalize_config(c) == c
    c["sede"] = 1
    with pytest.raises(fd.ForgetDissectError) as err:
        fd.normalize_config(c)
    assert fd.error_kind(err.value) == "config"
    assert err.value.args[2] == 3


def test_pipeline_end_to_end(tmp_path):
    c = tiny_config(tmp_path)
    with pytest.raises(fd.ForgetDissectError) as err:
        fd.train_base(c)
    assert fd.error_kind(err.value) == "input"

    results = fd.run_all(c)
    assert len(results) == 7
    assert not any(r["skipped"] for r in results)
    assert all(fd.verify_checksum_index(r["dir"]) for r in results)
    assert all(r["skipped"] for r in fd.run_all(c))

    report = fd.load_report(tmp_path / "dissect" / "report.json")
    assert report["num_blocks"] == 4
    assert set(report["forgetting_set"]) <= {1, 2, 3, 4}

    s = fd.load_sample(tmp_path / "data" / "dataset", 0)
    assert s["image"].shape == (16, 16, 3)
    assert s["mask"].shape == (16, 16)
    assert s["words"][-1] == "<eos>"

    donors = [fd.load_sample(tmp_path / "data" / "dataset", i)["image"] for i in (1, 2, 3)]
    maps = fd.block_relevance(tmp_path / "base" / "model.fdsnap", s["image"], 1, donors,
                              {"num_samples": 2, "window": 3})
    assert maps.shape == (16, 16, 16)
    assert np.isfinite(maps).all()


CLI = os.environ.get("FORGETDISSECT_CLI")


@pytest.mark.skipif(not CLI, reason="command-line tool path not provided")
def test_cli_exit_codes(tmp_path):
    def run(*args, **env):
        return subprocess.run([CLI, *args], capture_output=True, text=True,
                              env={**os.environ, **env})

    assert run("frobnicate").returncode == 2
    assert run().returncode == 2

    missing = run("--config", str(tmp_path / "none.json"), "gen-data")
    assert missing.returncode == 9
    assert json.loads(missing.stderr.strip().splitlines()[-1])["error"] == "io"

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sede": 1}))
    assert run("--config", str(bad), "gen-data").returncode == 3

    assert run("--out", str(tmp_path / "o"), "train-base").returncode == 4

    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(tiny_config(tmp_path / "ignored")))
    via_env = run("--config", str(cfg), "gen-data", FORGETDISSECT_OUT=str(tmp_path / "env"))
    assert via_env.returncode == 0, via_env.stderr
    assert (tmp_path / "ignored" / "data" / "SHA256SUMS").exists()

    c = tiny_config(tmp_path / "x")
    c["output_root"] = ""
    cfg.write_text(json.dumps(c))
    assert run("--config", str(cfg), "gen-data", FORGETDISSECT_OUT=str(tmp_path / "env")).returncode == 0
    assert (tmp_path / "env" / "data" / "SHA256SUMS").exists()
    flag = run("--config", str(cfg), "--out", str(tmp_path / "flag"), "--seed", "5", "gen-data")
    assert flag.returncode == 0
    assert (tmp_path / "flag" / "data" / "SHA256SUMS").exists()
