import json
import subprocess
import sys

import pytest
from conftest import SMALL

from multiref.backbone import init_params
from multiref.checkpoint import load_checkpoint, save_checkpoint
from multiref.harness.cli import main
from multiref.rasters import write_png
from multiref.taskgen import read_dataset

SMALL_MODEL = ["--model.layers", "2", "--model.width", "32", "--model.heads", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--count", "12", "--seed", "3"]) == 0
    ckpt = save_checkpoint(root / "init.ckpt", init_params(SMALL, 0), 0)
    return root, ckpt


def test_gen_data_writes_dataset(workspace):
    root, _ = workspace
    data = read_dataset(root / "data")
    assert len(data) == 12 and data[0].id == "s3_000000"
    resolved = json.loads((root / "data" / "resolved_config.json").read_text())
    assert resolved["gen"]["count"] == 12 and resolved["seed"] == 3
    assert not (root / "data" / ".lock").exists()


def test_train_sft_with_overrides(workspace, capsys):
    root, _ = workspace
    out = root / "sft"
    rc = main(["train-sft", "--data", str(root / "data"), "--out", str(out), "--steps", "3",
               "--sft.batch_size", "2", "--sft.warmup_steps=1", *SMALL_MODEL])
    assert rc == 0
    lines = (out / "sft_metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    params, header = load_checkpoint(out / "sft_final.ckpt")
    assert header["step"] == 3 and params.config.width == 32
    assert "checkpoint:" in capsys.readouterr().out


def test_train_rl_and_eval(workspace):
    root, ckpt = workspace
    rc = main(["train-rl", "--ckpt", str(ckpt), "--data", str(root / "data"), "--out", str(root / "rl"),
               "--steps", "1", "--rl.group_size", "2", "--rl.steps_per_trajectory", "3",
               "--rl.prompts_per_step", "1"])
    assert rc == 0
    assert len((root / "rl" / "rl_metrics.jsonl").read_text().splitlines()) == 1
    assert (root / "rl" / "rl_final.ckpt").exists()
    rc = main(["eval", "--ckpt", str(root / "rl" / "rl_final.ckpt"), "--data", str(root / "data"),
               "--out", str(root / "ev"), "--eval.steps", "2", "--eval.limit", "4"])
    assert rc == 0
    report = json.loads((root / "ev" / "eval_report.json").read_text())
    assert report["aggregates"]["overall"]["count"] == 4


def test_sample_and_plot(workspace):
    root, ckpt = workspace
    sample = read_dataset(root / "data")[0]
    refs = []
    for i, r in enumerate(sample.references):
        write_png(r, root / f"ref{i}.png")
        refs.append(str(root / f"ref{i}.png"))
    out = root / "s" / "img.png"
    rc = main(["sample", "--ckpt", str(ckpt), "--refs", *refs, "--instruction", sample.instruction.text,
               "--output", str(out), "--eval.steps", "2", "--stochastic"])
    assert rc == 0 and out.exists()
    rc = main(["plot", str(root / "sft" / "sft_metrics.jsonl"), "--out", str(root / "charts")])
    assert rc == 0 and (root / "charts" / "sft_metrics_loss.svg").exists()


@pytest.mark.parametrize("argv,needle", [
    ([], "subcommand is required"),
    (["train-sft"], "data.train"),
    (["train-sft", "--data", "d", "--sft.nope", "1"], "unknown flag --sft.nope"),
    (["train-sft", "--data", "d", "--sft.batch_size", "0"], "sft.batch_size"),
    (["eval", "--data", "d", "--eval.steps"], "needs a value"),
    (["frobnicate"], "invalid choice"),
])
def test_usage_errors_exit_2(argv, needle, capsys):
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert needle in err and "usage:" in err


def test_runtime_error_exit_1(tmp_path, capsys):
    rc = main(["train-sft", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error: DatasetError" in capsys.readouterr().err


def test_locked_output_rejected(tmp_path, capsys):
    (tmp_path / ".lock").write_text("1")
    assert main(["gen-data", "--out", str(tmp_path), "--count", "1"]) == 1
    assert "in use" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "multiref", "gen-data", "--out", str(tmp_path), "--count", "2"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "wrote 2 samples" in proc.stdout
