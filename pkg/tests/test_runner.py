import json

import numpy as np
import pytest

from clpad.config import ConfigError, ExperimentConfig, dump_config, from_mapping, load_config, schema_markdown
from clpad.runner import (
    ReportError,
    RunRecord,
    _fmt,
    build_stream,
    load_records,
    report,
    run_experiment,
    summarize,
)

TINY = dict(n_tasks=2, n_train=6, n_test=4, image_size=[32, 32])


def _cfg(method="padim", strategy="finetune", tmp=None, **kw):
    base = dict(TINY)
    base.update(kw)
    if tmp is not None:
        base["output"] = str(tmp)
    return ExperimentConfig(method=method, strategy=strategy, **base)


# -- configuration ----------------------------------------------------------------


def test_config_pairing_errors():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="stfpm", strategy="replay")
    assert err.value.key == "replay_capacity"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="cfa", strategy="cl_bank")
    assert err.value.key == "replay_capacity"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="stfpm", strategy="cl_bank")
    assert err.value.key == "strategy"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="padim", strategy="joint", bank_capacity=10)
    assert err.value.key == "bank_capacity"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="padim", strategy="joint", params={"epochs": 3})
    assert err.value.key == "params.epochs"
    with pytest.raises(ConfigError):
        ExperimentConfig(method="padim", strategy="joint", params={"random_state": 3})
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="padim", strategy="joint", stream="mvtec")
    assert err.value.key == "mvtec_root"
    with pytest.raises(ConfigError) as err:
        ExperimentConfig(method="padim", strategy="joint", n_tasks="3")
    assert err.value.key == "n_tasks"
    for method in ("padim", "patchcore", "cfa", "stfpm", "fastflow", "draem", "efficientad"):
        ExperimentConfig(method=method, strategy="joint")
        ExperimentConfig(method=method, strategy="finetune")


def test_config_file_roundtrip(tmp_path):
    cfg = _cfg("stfpm", "replay", replay_capacity=4, params={"epochs": 2})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert "params.epochs: 2" in path.read_text()
    with pytest.raises(ConfigError) as err:
        from_mapping({"method": "stfpm", "strategy": "finetune", "bogus": 1})
    assert err.value.key == "bogus"
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_schema_lists_every_key():
    table = schema_markdown()
    for key in ("method", "strategy", "replay_capacity", "bank_capacity", "seeds", "params.<name>"):
        assert f"`{key}`" in table


# -- running ------------------------------------------------------------------------

def test_run_fills_lower_triangle_and_persists(tmp_path):
    rec = run_experiment(_cfg(tmp=tmp_path), 0)
    for R in rec.matrices.values():
        assert R.is_complete() and np.isnan(R.values[0, 1])
    run_dir = tmp_path / "padim_finetune_seed0"
    assert (run_dir / "config.yaml").exists() and (run_dir / "R_pixel_f1.csv").exists()
    back = RunRecord.load(run_dir)
    assert back.matrices == rec.matrices and back.provenance == rec.provenance
    assert load_config(run_dir / "config.yaml") == _cfg(tmp=tmp_path)
    with pytest.raises(ConfigError):
        run_experiment(_cfg(tmp=tmp_path), 0)


def test_same_config_and_seed_give_identical_files(tmp_path):
    for sub in ("a", "b"):
        run_experiment(_cfg("stfpm", "replay", tmp=tmp_path / sub, replay_capacity=4, params={"epochs": 1}), 0)
    for name in ("R_pixel_f1.csv", "R_image_auroc.json", "R_aupro.csv"):
        a = (tmp_path / "a" / "stfpm_replay_seed0" / name).read_bytes()
        b = (tmp_path / "b" / "stfpm_replay_seed0" / name).read_bytes()
        assert a == b


@pytest.mark.parametrize("method", ["padim", "patchcore", "cfa"])
def test_single_task_strategies_agree(method):
    kw = dict(n_tasks=1, params={"epochs": 1} if method == "cfa" else {})
    results = []
    for strategy in ("joint", "finetune", "replay", "cl_bank"):
        rec = run_experiment(_cfg(method, strategy, replay_capacity=4, **kw), 0, save=False)
        results.append(rec.matrices)
    assert all(r == results[0] for r in results[1:])


def test_training_never_reads_test_splits():
    cfg = _cfg("stfpm", "replay", replay_capacity=4, params={"epochs": 1})
    stream = build_stream(cfg)
    run_experiment(cfg, 0, stream=stream, save=False)
    log = stream.access_log
    assert log.reads("train", "test") == []
    assert sorted(set(log.reads("eval", "test"))) == [0, 1]


def test_leaking_estimator_is_caught(monkeypatch):
    cfg = _cfg()
    stream = build_stream(cfg)
    from clpad import runner

    real = runner.build_estimator

    def sneaky(cfg, seed):
        est = real(cfg, seed)
        learn = est._learn_task

        def peek(samples, replay, bank):
            stream[0].test  # reads the test split during training
            return learn(samples, replay, bank)

        est._learn_task = peek
        return est

    monkeypatch.setattr(runner, "build_estimator", sneaky)
    monkeypatch.setattr(runner, "clone", lambda e: e)
    with pytest.raises(RuntimeError, match="test splits"):
        run_experiment(cfg, 0, stream=stream, save=False)


def test_replay_log_contains_past_tasks():
    rec = run_experiment(_cfg("fastflow", "replay", replay_capacity=4, n_tasks=3, n_train=12,
                              params={"epochs": 2, "flow_steps": 2}), 0, save=False)
    assert rec.consumed == [[0], [0, 1], [0, 1, 2]]
    rec = run_experiment(_cfg("fastflow", "finetune", n_tasks=3, params={"epochs": 1, "flow_steps": 2}),
                         0, save=False)
    assert rec.consumed == [[0], [1], [2]]


def test_finetune_and_replay_share_task_data_order():
    a = run_experiment(_cfg("stfpm", "finetune", params={"epochs": 1}), 0, save=False)
    b = run_experiment(_cfg("stfpm", "replay", replay_capacity=4, params={"epochs": 1}), 0, save=False)
    # task 0 has no replay yet, so the first row must coincide
    np.testing.assert_array_equal(a.matrices["pixel_f1"].values[0], b.matrices["pixel_f1"].values[0])


def test_memory_accounting_per_strategy():
    rec = run_experiment(_cfg("stfpm", "replay", replay_capacity=4, params={"epochs": 1}), 0, save=False)
    assert rec.memory.additional_mb == pytest.approx(4 * 32 * 32 * 3 / 1e6)
    rec = run_experiment(_cfg("patchcore", "cl_bank", bank_capacity=50), 0, save=False)
    # two stores of 25 patches, layer2 + layer3 of the random CNN = 192 channels
    assert rec.memory.additional_mb == pytest.approx(50 * 192 * 4 / 1e6)
    assert rec.memory.architecture_mb > 0


def test_joint_fills_last_row_unless_prefix():
    rec = run_experiment(_cfg("padim", "joint"), 0, save=False)
    R = rec.matrices["pixel_f1"].values
    assert np.isnan(R[0, 0]) and np.isfinite(R[1]).all()
    rec = run_experiment(_cfg("padim", "joint", joint_prefix=True), 0, save=False)
    assert rec.matrices["pixel_f1"].is_complete()


# -- reporting ------------------------------------------------------------------------


def test_report_roundtrip(tmp_path):
    run_experiment(_cfg("padim", "finetune", tmp=tmp_path), 0)
    run_experiment(_cfg("padim", "cl_bank", tmp=tmp_path), 0)
    run_experiment(_cfg("padim", "joint", tmp=tmp_path), 0)
    records = load_records(tmp_path)
    out = report(records, tmp_path / "report")
    lines = out["table"].read_text().splitlines()
    assert lines[0].startswith("Metric,")
    assert len(lines) == 12
    md = out["markdown"].read_text()
    assert "Average forgetting [%]" in md and "%" in md
    assert (tmp_path / "report" / "curve_padim_pixel_f1.png").exists()
    cols = json.loads((tmp_path / "report" / "summary.json").read_text())
    assert cols["padim/joint"]["gap"] == 0.0


def test_report_refuses_mixed_streams(tmp_path):
    run_experiment(_cfg(tmp=tmp_path / "a"), 0)
    run_experiment(_cfg(tmp=tmp_path / "b", stream_seed=1), 0)
    records = load_records(tmp_path / "a") + load_records(tmp_path / "b")
    with pytest.raises(ReportError):
        summarize(records)
    with pytest.raises(ReportError):
        load_records(tmp_path / "empty")


def test_one_record_gives_one_column(tmp_path):
    run_experiment(_cfg(tmp=tmp_path), 0)
    assert list(summarize(load_records(tmp_path))) == ["padim/finetune"]


def test_cell_formatting():
    assert _fmt("pixel_f1", 0.5812) == "0.58"
    assert _fmt("forgetting", -4.7) == "-4.70%"
    assert _fmt("gap", 12.345) == "12.35%"
    assert _fmt("additional_mb", 58.982) == "59.0"
    assert _fmt("time", 480) == "8min 0s"
    assert _fmt("pixel_f1", float("nan")) == "-"
