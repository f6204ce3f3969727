import json
import subprocess
import sys

from clpad.cli import main

CONFIG = """\
method: padim
strategy: finetune
n_tasks: 2
n_train: 6
n_test: 4
image_size: [32, 32]
seeds: [0]
"""


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_validate_ok(tmp_path, capsys):
    path = tmp_path / "ok.yaml"
    path.write_text(CONFIG)
    assert main(["validate", str(path)]) == 0
    assert json.loads(capsys.readouterr().out)["valid"] is True


def test_validate_names_missing_replay_capacity(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(CONFIG.replace("finetune", "replay"))
    assert main(["validate", str(path)]) == 2
    err = _error_line(capsys)
    assert err["error"] == "ConfigError" and err["key"] == "replay_capacity"


def test_usage_error_is_one_json_line(capsys):
    assert main(["frobnicate"]) == 2
    assert _error_line(capsys)["error"] == "UsageError"


def test_run_then_report(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(CONFIG)
    out = tmp_path / "results"
    assert main(["run", str(path), "--output", str(out), "--seed", "3"]) == 0
    assert (out / "padim_finetune_seed3" / "record.json").exists()
    assert main(["report", str(out)]) == 0
    table = (out / "table.csv").read_text().splitlines()
    assert table[0] == "Metric,padim/finetune"
    assert all(len(row.split(",")) == 2 for row in table)
    capsys.readouterr()
    # append-only results: a second identical run is refused with a runtime-style error line
    assert main(["run", str(path), "--output", str(out), "--seed", "3"]) == 2
    assert _error_line(capsys)["key"] == "output"


def test_unsupported_device(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text(CONFIG)
    assert main(["run", str(path), "--output", str(tmp_path), "--device", "cuda"]) == 2
    assert _error_line(capsys)["key"] == "device"


def test_synth_stream_writes_layout(tmp_path, capsys):
    out = tmp_path / "synth"
    assert main(["synth-stream", "--n-tasks", "2", "--n-train", "3", "--n-test", "2", "--size", "32",
                 "--output", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["categories"] == ["synthetic_0", "synthetic_1"]
    assert len(list((out / "synthetic_0" / "train" / "good").iterdir())) == 3


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "clpad.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("clpad ")
