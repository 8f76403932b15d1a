import json
import subprocess
import sys

import pytest

from gnmr.cli import build_parser, main, run_config


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("synth", "--users", 60, "--items", 150, "--behaviors", 3, "--rho", 0.9, "--seed", 3, "--out", d) == 0
    return d


def test_synth_is_byte_identical_and_records_density(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--users", 50, "--items", 40, "--behaviors", 3, "--rho", 0.8, "--seed", 7,
                   "--out", tmp_path / name) == 0
    assert (tmp_path / "a/events.tsv").read_bytes() == (tmp_path / "b/events.tsv").read_bytes()
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert 0 < manifest["density"] < 1 and manifest["schema"]["names"] == ["aux1", "aux2", "target"]


def test_synth_rho_extremes_in_manifest(tmp_path):
    corr = {}
    for rho in (0.0, 1.0):
        run("synth", "--users", 200, "--items", 150, "--behaviors", 2, "--rho", rho, "--out", tmp_path / str(rho))
        corr[rho] = json.loads((tmp_path / str(rho) / "manifest.json").read_text())["aux_target_correlation"]
    assert abs(corr[0.0]) < 0.05 and corr[1.0] > 0.3


def test_train_writes_artifacts_embedding_config(data, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--data", data / "events.tsv", "--out", out, "--epochs", 3) == 0
    assert "trained 3 epochs" in capsys.readouterr().out
    for name in ("best.ckpt", "train_log.csv", "split.json", "config.json", "ids.json"):
        assert (out / name).exists()
    ckpt = json.loads((out / "best.ckpt").read_text())
    conf = json.loads((out / "config.json").read_text())["run_config"]
    assert ckpt["config"] == conf and conf["epochs"] == 3 and conf["behavior_names"] == ["aux1", "aux2", "target"]


def test_micro_data_trains_without_evaluable_users(tmp_path, capsys):
    run("synth", "--users", 12, "--items", 40, "--behaviors", 2, "--out", tmp_path / "d")
    assert run("train", "--data", tmp_path / "d/events.tsv", "--out", tmp_path / "r", "--epochs", 2) == 0
    assert (tmp_path / "r/best.ckpt").exists()
    assert run("evaluate", "--ckpt", tmp_path / "r/best.ckpt") == 3


@pytest.mark.parametrize("flags", [["--layers", 0], ["--behaviors-use", "target"], ["--ablate-be", "--ablate-ma"],
                                   ["--norm", "mean", "--residual", "double", "--score", "layer-concat"],
                                   ["--mode", "sampled", "--cap", "none"]])
def test_train_variants(data, tmp_path, flags):
    assert run("train", "--data", data / "events.tsv", "--out", tmp_path, "--epochs", 2, *flags) == 0


def test_evaluate_twice_identical_with_cutoffs_and_baseline(data, tmp_path, capsys):
    run("train", "--data", data / "events.tsv", "--out", tmp_path, "--epochs", 2)
    ckpt = tmp_path / "best.ckpt"
    outs = []
    for name in ("e1", "e2"):
        assert run("evaluate", "--ckpt", ckpt, "--out", tmp_path / name, "--cutoffs", "1,3,5,7,9",
                   "--baseline", "popularity") == 0
        outs.append((tmp_path / name / "report.json").read_bytes())
    assert outs[0] == outs[1]
    report = json.loads(outs[0])
    assert report["cutoffs"] == [1, 3, 5, 7, 9] and report["baselines"][0]["label"] == "popularity"
    assert report["run_config"]["epochs"] == 2
    assert "popularity" in capsys.readouterr().out


def test_config_file_with_flag_override(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"run_config": {"dim": 8, "heads": 4, "epochs": 7}}))
    args = build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "2", "--data", "x"])
    conf = run_config(args)
    assert (conf.dim, conf.heads, conf.epochs, conf.data) == (8, 4, 2, "x")


def test_rerun_from_embedded_config_reproduces(data, tmp_path):
    run("train", "--data", data / "events.tsv", "--out", tmp_path / "a", "--epochs", 3, "--seed", 5)
    run("train", "--config", tmp_path / "a/config.json", "--out", tmp_path / "b")
    a = json.loads((tmp_path / "a/best.ckpt").read_text())["params"]
    b = json.loads((tmp_path / "b/best.ckpt").read_text())["params"]
    assert a == b


@pytest.mark.parametrize("args, code", [
    (["train", "--data", "D", "--dim", 15, "--heads", 2], 2),
    (["train", "--data", "D", "--layers", 9, "--lr", -1], 2),
    (["train", "--data", "D", "--behaviors-use", "nope"], 2),
    (["train", "--data", "missing.tsv", "--behavior-names", "a,b"], 3),
    (["ablate", "--data", "D", "--variants", "bogus"], 2),
    (["evaluate", "--ckpt", "missing.ckpt"], 3),
])
def test_exit_codes(data, args, code, capsys):
    args = [str(data / "events.tsv") if a == "D" else a for a in args]
    assert run(*args) == code
    assert "error" in capsys.readouterr().err


def test_all_config_errors_reported_at_once(data, capsys):
    run("train", "--data", data / "events.tsv", "--dim", 15, "--epochs", 0, "--lr", -1)
    err = capsys.readouterr().err
    assert "divisible" in err and "epochs" in err and "lr" in err


def test_numerical_failure_exit_code(data, tmp_path):
    code = run("train", "--data", data / "events.tsv", "--out", tmp_path, "--epochs", 3, "--init", "autoencoder",
               "--init-scale", 1e120)
    assert code == 4


def test_ablate_grid_order_and_checkpoints(data, tmp_path, capsys):
    assert run("ablate", "--data", data / "events.tsv", "--out", tmp_path, "--epochs", 2, "--seeds", 2,
               "--variants", "depth-0,full,no-attention") == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["depth-0", "full", "no-attention"]
    assert all(r["seeds"] == 2 and not r["failures"] for r in rows)
    for v in ("depth-0", "full", "no-attention"):
        for s in (0, 1):
            assert (tmp_path / "variants" / v / f"seed{s}" / "best.ckpt").exists()
    assert capsys.readouterr().out.splitlines()[0].split()[:3] == ["variant", "HR@10", "NDCG@10"]


def test_ablate_full_grid_names(data):
    from gnmr.config import RunConfig
    from gnmr.pipeline import ablation_variants, resolve_schema
    cfg = resolve_schema(RunConfig(data=str(data / "events.tsv")))
    assert list(ablation_variants(cfg.schema(), cfg)) == [
        "full", "no-behavior-embedding", "no-attention", "without-aux1", "without-aux2", "only-target",
        "depth-0", "depth-1", "depth-2", "depth-3"]


def test_help_marks_chosen_defaults():
    out = subprocess.run([sys.executable, "-m", "gnmr", "train", "--help"], capture_output=True, text=True).stdout
    for flag in ("--epochs", "--decay-every", "--norm", "--residual", "--score", "--lambda"):
        assert flag in out
    assert out.count("chosen") >= 8
