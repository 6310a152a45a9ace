import json
import os
import subprocess
import sys

import pytest

from gdfd.cli import main

TINY = ["n_train=200", "n_test=50", "teacher_steps=6", "steps=6", "warmup=2", "decay_interval=2",
        "eval_every=3", "batch_size=8", "gen_steps=3", "gen_batch_size=4", "latent_dim=4",
        "gen_widths=4,4,2", "n_per_class=3", "synth_steps=2", "k=2"]

COMMANDS = ["train-teacher", "estimate-stats", "train-generator", "train-ensemble", "synth-direct",
            "distill", "eval", "export-samples", "ablate"]


def run(*args):
    flags = []
    for item in TINY:
        flags += ["--set", item]
    return main(list(args) + flags)


def snapshot(directory):
    out = {}
    for root, _, files in os.walk(directory):
        for name in files:
            path = os.path.join(root, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, directory)] = fh.read()
    return out


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert run("train-teacher", "--out", str(root / "t"), "--seed", "7") == 0
    assert run("train-ensemble", "--out", str(root / "e"), "--teacher", str(root / "t" / "teacher.gdfd")) == 0
    return root


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    assert "--seed" in text and "--set" in text


def test_top_level_usage_errors(capsys):
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["distill", "--out", "x"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_config_errors_are_usage_errors(tmp_path, capsys):
    assert main(["train-teacher", "--out", str(tmp_path), "--set", "lambda_s=banana"]) == 1
    assert "lambda_s" in capsys.readouterr().err
    assert main(["train-teacher", "--out", str(tmp_path), "--set", "nonsense=1"]) == 1


def test_runtime_errors_exit_two(tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "missing.gdfd")]) == 2
    assert "error" in capsys.readouterr().err


def test_train_teacher_outputs(runs):
    files = set(os.listdir(runs / "t"))
    assert {"teacher.gdfd", "metrics.csv", "config.txt", "run.json"} <= files
    manifest = json.loads((runs / "t" / "run.json").read_text())
    assert manifest["command"] == "train-teacher" and manifest["seed"] == 7
    assert manifest["config"]["teacher_steps"] == 6
    assert (runs / "t" / "metrics.csv").read_text().startswith("step,lr,kd_loss,eval_accuracy\n")


def test_rerun_is_byte_identical(runs):
    before = snapshot(runs / "t")
    assert run("train-teacher", "--out", str(runs / "t"), "--seed", "7") == 0
    assert snapshot(runs / "t") == before


def test_every_subcommand_runs(runs, tmp_path):
    teacher = str(runs / "t" / "teacher.gdfd")
    manifest = str(runs / "e" / "ensemble" / "ensemble.json")
    assert os.path.exists(manifest)
    assert run("estimate-stats", "--out", str(tmp_path / "s"), "--teacher", teacher) == 0
    assert any(f.startswith("moments_") for f in os.listdir(tmp_path / "s"))
    assert run("train-generator", "--out", str(tmp_path / "g"), "--teacher", teacher, "--classes", "0,1") == 0
    assert {"generator.gdfd", "generator_metrics.csv"} <= set(os.listdir(tmp_path / "g"))
    assert run("synth-direct", "--out", str(tmp_path / "d"), "--teacher", teacher, "--per-class", "2") == 0
    assert run("distill", "--out", str(tmp_path / "x"), "--teacher", teacher, "--ensemble", manifest) == 0
    assert {"student.gdfd", "metrics.csv", "summary.csv"} <= set(os.listdir(tmp_path / "x"))
    assert run("distill", "--out", str(tmp_path / "n"), "--teacher", teacher, "--source", "noise") == 0
    assert run("eval", "--out", str(tmp_path / "v"), "--model", str(tmp_path / "x" / "student.gdfd")) == 0
    assert run("export-samples", "--out", str(tmp_path / "p"), "--ensemble", manifest, "--n", "6") == 0
    assert (tmp_path / "p" / "grid.pgm").read_bytes().startswith(b"P5\n")
    assert run("ablate", "--out", str(tmp_path / "a"), "--mode", "losses", "--teacher", teacher) == 0
    rows = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert rows[0] == "variant,seed,accuracy"
    assert [r.split(",")[0] for r in rows[1:]] == ["ce", "moments", "both"]


def test_distill_needs_ensemble_for_ensemble_source(runs, tmp_path):
    assert run("distill", "--out", str(tmp_path), "--teacher", str(runs / "t" / "teacher.gdfd")) == 1


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "gdfd.cli", "eval", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "--model" in out.stdout
