import json
import os
import subprocess
import sys

import numpy as np
import pytest

from timesbert import checkpoint
from timesbert.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main, read_config_file
from timesbert.data import FamilySpec, generate_anomaly_stream, generate_synthetic_corpus, save_corpus
from timesbert.heads import read_representations

TINY = ["--d-model", "16", "--layers", "1", "--heads", "2", "--context-len", "128", "--batch-size", "4"]


def run(*args):
    return main([str(a) for a in args])


def last_report(capsys):
    out = capsys.readouterr().out.strip().splitlines()
    return json.loads(out[-1])


@pytest.fixture
def small_data(tmp_path):
    d = tmp_path / "data"
    save_corpus(generate_synthetic_corpus(
        [FamilySpec(f, 6, 2, 32, 0.05) for f in ("sine-mix", "sawtooth")], seed=3), d)
    return d


@pytest.fixture
def base_ckpt(tmp_path, small_data):
    out = tmp_path / "pre"
    assert run("pretrain", "--data", small_data, "--out", out, "--steps", 0, "--patch-len", 4, *TINY) == EXIT_OK
    return out / "model.ckpt"


# ---------------------------------------------------------------- gen-data / pretrain


def test_gen_data_writes_loadable_corpus(tmp_path, capsys):
    assert run("gen-data", "--synthetic", "classify", "--out", tmp_path / "g") == EXIT_OK
    assert (tmp_path / "g" / "manifest.json").exists() and (tmp_path / "g" / "samples.csv").exists()


def test_gen_data_anomaly_stream(tmp_path, capsys):
    assert run("gen-data", "--synthetic", "anomaly", "--out", tmp_path / "a") == EXIT_OK
    header = (tmp_path / "a" / "stream.csv").read_text().splitlines()[0]
    assert header == "v0,v1,label"


def test_pretrain_zero_steps_writes_init_checkpoint(base_ckpt):
    params, cfg = checkpoint.load(base_ckpt)
    assert params.config.d_model == 16 and params.config.patch_len == 4
    assert base_ckpt.with_name("metrics.jsonl").read_text() == ""


def test_pretrain_twice_gives_identical_logs(tmp_path, small_data, capsys):
    logs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("pretrain", "--data", small_data, "--out", out, "--steps", 3, "--seed", 5, "--patch-len", 4,
                   *TINY) == EXIT_OK
        logs.append((out / "metrics.jsonl").read_bytes())
        rep = last_report(capsys)
        assert rep["config"]["seed"] == 5 and rep["config"]["steps"] == 3
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path, small_data):
    code = run("pretrain", "--data", small_data, "--out", tmp_path / "d", "--steps", 5, "--lr", 1e150,
               "--patch-len", 4, *TINY)
    assert code == EXIT_NUMERIC


def test_missing_data_exits_2(tmp_path):
    assert run("pretrain", "--data", tmp_path / "nowhere", "--out", tmp_path / "o", "--steps", 0, *TINY) == EXIT_DATA


@pytest.mark.parametrize("argv", [[], ["pretrain", "--bogus"], ["pretrain", "--steps", "-1", "--out", "x"],
                                  ["pretrain", "--mask-ratio", "0"], ["pretrain", "--steps", "0"]])
def test_config_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == EXIT_CONFIG


# ---------------------------------------------------------------- config precedence


def test_config_file_then_flags(tmp_path, small_data, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("# tiny run\nseed = 11\nsteps = 2\nd-model = 16\nlayers = 1\nheads = 2\nbatch_size = 4\n")
    assert read_config_file(conf)["seed"] == 11
    assert run("pretrain", "--config", conf, "--data", small_data, "--out", tmp_path / "o", "--steps", 1,
               "--patch-len", 4) == EXIT_OK
    cfg = last_report(capsys)["config"]
    assert (cfg["seed"], cfg["steps"], cfg["d_model"]) == (11, 1, 16)


def test_config_file_unknown_key(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("learning_rate = 3\n")
    assert run("pretrain", "--config", conf, "--out", tmp_path / "o") == EXIT_CONFIG


# ---------------------------------------------------------------- finetune / eval


def test_patch_mismatch_shows_both_values(base_ckpt, tmp_path, small_data, caplog):
    code = run("finetune", "--task", "impute", "--from", base_ckpt, "--data", small_data, "--out", tmp_path / "f")
    assert code == EXIT_CONFIG
    assert "4" in caplog.text and "24" in caplog.text


def test_classify_finetune_then_eval(base_ckpt, tmp_path, small_data, capsys):
    out = tmp_path / "cls"
    assert run("finetune", "--task", "classify", "--from", base_ckpt, "--data", small_data, "--out", out,
               "--steps", 40, "--lr", 3e-3, "--patch-len", 4) == EXIT_OK
    val = last_report(capsys)
    assert val["task"] == "classify" and 0.0 <= val["metrics"]["accuracy"] <= 1.0
    ckpt = out / "task.ckpt"
    before = ckpt.read_bytes()
    assert run("eval", "--from", ckpt, "--out", out) == EXIT_OK
    test = last_report(capsys)
    assert "accuracy" in test["metrics"] and test["config"]["lr"] == 3e-3
    assert ckpt.read_bytes() == before  # eval is read-only
    assert len((out / "report.jsonl").read_text().splitlines()) == 2


def test_impute_report_echoes_mask_ratio(tmp_path, small_data, capsys):
    out = tmp_path / "imp"
    assert run("finetune", "--task", "impute", "--from", "random", "--data", small_data, "--out", out,
               "--steps", 2, "--mask-ratio", 0.25, "--patch-len", 4, *TINY) == EXIT_OK
    rep = last_report(capsys)
    assert rep["config"]["mask_ratio"] == 0.25
    assert {"mse", "mse_normalized", "mse_mean_fill"} <= set(rep["metrics"])


def test_anomaly_report_includes_quantile(tmp_path, capsys):
    st_ = generate_anomaly_stream(2, 1200, 0.02, seed=4)
    path = tmp_path / "stream.csv"
    v = st_.values.tolist()
    rows = ["a,b,label"] + [f"{v[0][t]!r},{v[1][t]!r},{int(st_.labels[t])}" for t in range(1200)]
    path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "an"
    assert run("finetune", "--task", "anomaly", "--from", "random", "--data", path, "--out", out, "--steps", 2,
               "--patch-len", 4, "--quantile-grid", "0.9,0.99", *TINY) == EXIT_OK
    capsys.readouterr()
    assert run("eval", "--from", out / "task.ckpt") == EXIT_OK
    m = last_report(capsys)["metrics"]
    assert m["quantile"] in (0.9, 0.99) and m["best_quantile"] in (0.9, 0.99)
    assert m["best_f1"] >= m["f1"] and {"f1@0.9", "f1@0.99"} <= set(m)


def test_bad_quantile_grid_exits_1(tmp_path):
    assert run("finetune", "--task", "anomaly", "--from", "random", "--out", tmp_path / "q", "--steps", 0,
               "--quantile-grid", "0.9,1.5", *TINY) == EXIT_CONFIG


def test_forecast_metrics_per_family_and_average(tmp_path, capsys):
    d = tmp_path / "fc"
    c = generate_synthetic_corpus([FamilySpec("trend-season", 6, 1, 56, 0.05, periods=(12,)),
                                   FamilySpec("sine-mix", 6, 1, 56, 0.05)], seed=2)
    for s in c.samples:
        s.values = s.values + 10.0
    save_corpus(c, d)
    assert run("finetune", "--task", "forecast", "--from", "random", "--data", d, "--out", tmp_path / "f",
               "--steps", 2, "--patch-len", 4, *TINY) == EXIT_OK
    m = last_report(capsys)["metrics"]
    for k in ("smape", "mase", "owa"):
        assert k in m and f"trend-season/{k}" in m and f"sine-mix/{k}" in m


def test_empty_split_exits_2(tmp_path):
    d = tmp_path / "one"
    save_corpus(generate_synthetic_corpus([FamilySpec("sine-mix", 1, 1, 32)], seed=0), d)
    assert run("finetune", "--task", "impute", "--from", "random", "--data", d, "--out", tmp_path / "o",
               "--steps", 1, "--patch-len", 4, *TINY) == EXIT_DATA


def test_eval_rejects_non_checkpoint(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert run("eval", "--from", junk) == EXIT_DATA


# ---------------------------------------------------------------- export


def test_export_dom_matrix_and_sidecar(base_ckpt, tmp_path, small_data, capsys):
    files = []
    for name in ("x", "y"):
        out = tmp_path / name
        assert run("export", "--from", base_ckpt, "--data", small_data, "--which", "dom", "--out", out) == EXIT_OK
        files.append(((out / "dom.tsbe").read_bytes(), (out / "dom.tsbe.tsv").read_bytes()))
    mat = read_representations(tmp_path / "x" / "dom.tsbe")
    assert mat.shape == (12, 16)
    assert len(files[0][1].decode().splitlines()) == 12 + 1
    assert files[0] == files[1]
    assert np.isfinite(mat).all()


def test_export_unknown_which_exits_1(base_ckpt, tmp_path, small_data):
    assert run("export", "--from", base_ckpt, "--data", small_data, "--which", "cls", "--out", tmp_path / "e") \
        == EXIT_CONFIG


# ---------------------------------------------------------------- logging


@pytest.mark.parametrize("level, shown", [("error", False), ("info", True)])
def test_log_level_env(tmp_path, level, shown):
    d = tmp_path / "single"
    save_corpus(generate_synthetic_corpus([FamilySpec("sine-mix", 2, 1, 32)], seed=0), d)
    env = {**os.environ, "TIMESBERT_LOG": level}
    proc = subprocess.run([sys.executable, "-m", "timesbert.cli", "pretrain", "--data", str(d), "--out",
                           str(tmp_path / "o"), "--steps", "1", "--patch-len", "4", *TINY],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0
    assert ("single-dataset corpus" in proc.stderr) == shown


def test_debug_level_logs_steps(tmp_path, small_data):
    env = {**os.environ, "TIMESBERT_LOG": "debug"}
    proc = subprocess.run([sys.executable, "-m", "timesbert.cli", "pretrain", "--data", str(small_data), "--out",
                           str(tmp_path / "o"), "--steps", "2", "--patch-len", "4", *TINY],
                          env=env, capture_output=True, text=True)
    assert proc.returncode == 0 and "step 1 mpm" in proc.stderr
