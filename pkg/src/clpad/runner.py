"""Run a (method, strategy) pair over a task stream and report the results."""
from __future__ import annotations

import hashlib
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import clone

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, from_mapping
from .metrics import (
    MemoryReport,
    ResultMatrix,
    average_forgetting,
    average_over_tasks,
    average_so_far,
    evaluate_task,
    format_seconds,
    memory_report,
    relative_gap,
    timing_report,
)
from .registry import make_estimator
from .replay import ReplayBuffer
from .taskstream import MVTEC_OBJECTS, TaskStream, load_mvtec_stream, make_synthetic_stream, stack_masks

log = logging.getLogger(__name__)


class ReportError(ValueError):
    """Records cannot be combined into one report."""


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    size = tuple(cfg.image_size)
    if cfg.stream == "mvtec":
        return load_mvtec_stream(cfg.mvtec_root, cfg.categories or MVTEC_OBJECTS, size)
    return make_synthetic_stream(cfg.n_tasks, cfg.n_train, cfg.n_test, size, cfg.stream_seed,
                                 noise_std=cfg.noise_std, defect_shift=cfg.defect_shift)


def build_estimator(cfg: ExperimentConfig, seed: int):
    params = dict(cfg.params)
    if cfg.bank_capacity is not None:
        params["bank_capacity"] = cfg.bank_capacity
    return make_estimator(cfg.method, params, cfg.backbone, random_state=seed)


def provenance_hash(cfg: ExperimentConfig, seed: int) -> str:
    payload = json.dumps({"config": cfg.to_dict(), "seed": seed, "version": __version__}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def run_dirname(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.method}_{cfg.strategy}_seed{seed}"


@dataclass
class RunRecord:
    config: dict
    seed: int
    matrices: dict
    memory: MemoryReport
    timing: dict
    provenance: str
    stream_digest: str
    task_names: list
    events: list = field(default_factory=list)
    consumed: list = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.config["method"]

    @property
    def strategy(self) -> str:
        return self.config["strategy"]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.yaml").write_text(dump_config(from_mapping(self.config)))
        for R in self.matrices.values():
            R.save(directory)
        record = {
            "config": self.config,
            "seed": self.seed,
            "metrics": sorted(self.matrices),
            "memory": self.memory.as_dict(),
            "timing": self.timing,
            "provenance": self.provenance,
            "stream_digest": self.stream_digest,
            "task_names": self.task_names,
            "events": self.events,
            "consumed": self.consumed,
        }
        (directory / "record.json").write_text(json.dumps(record, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "RunRecord":
        directory = Path(directory)
        rec = json.loads((directory / "record.json").read_text())
        matrices = {
            m: ResultMatrix.from_json((directory / f"R_{m}.json").read_text()) for m in rec["metrics"]
        }
        mem = rec["memory"]
        return cls(rec["config"], rec["seed"], matrices,
                   MemoryReport(mem["architecture_mb"], mem["additional_mb"]), rec["timing"],
                   rec["provenance"], rec["stream_digest"], rec["task_names"], rec["events"],
                   rec.get("consumed", []))


def _evaluate(est, stream, t, cfg, matrices):
    for i in range(t + 1):
        test = stream[i].test
        maps, scores = est.predict_maps(test)
        labels = np.array([s.is_anomalous for s in test], dtype=int)
        values = evaluate_task(maps, scores, stack_masks(test), labels, cfg.metrics, cfg.pooling)
        for m, v in values.items():
            matrices[m][t, i] = v


def run_experiment(cfg: ExperimentConfig, seed: Optional[int] = None, stream: Optional[TaskStream] = None,
                   save: bool = True) -> RunRecord:
    """Train through the stream, evaluating every seen task after each task.

    ``finetune`` continues from the previous task on the new data only (bank
    methods refit and replace their bank); ``replay`` mixes a replay buffer
    into training (bank methods refit on the task plus the buffer);
    ``cl_bank`` applies the method's constant-memory bank update (CFA
    additionally trains its descriptor with replay); ``joint`` retrains a
    fresh estimator on the union of all tasks so far.
    """
    seed = cfg.seeds[0] if seed is None else seed
    if cfg.device != "cpu":
        raise ConfigError(f"device {cfg.device!r} is not supported; use 'cpu'", "device")
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out_dir = Path(cfg.output) / run_dirname(cfg, seed)
    if save and (out_dir / "record.json").exists():
        raise ConfigError(f"results already exist in {out_dir}; results directories are append-only", "output")
    stream = build_stream(cfg) if stream is None else stream
    access = stream.access_log
    template = build_estimator(cfg, seed)
    est = clone(template)
    T = len(stream)
    meta = {"method": cfg.method, "strategy": cfg.strategy, "seed": seed, "tasks": stream.names}
    matrices = {m: ResultMatrix(T, m, metadata=meta) for m in cfg.metrics}
    buffer = ReplayBuffer(cfg.replay_capacity, seed) if cfg.replay_capacity else None
    uses_buffer = cfg.strategy == "replay" or (cfg.strategy == "cl_bank" and cfg.method == "cfa")
    events = []
    consumed = []
    seen = []
    for t, task in enumerate(stream):
        evaluate_now = cfg.strategy != "joint" or cfg.joint_prefix or t == T - 1
        start = time.perf_counter()
        with access.during("train"):
            train = task.train
            seen.extend(train)
            if cfg.strategy == "joint":
                if evaluate_now:
                    est = clone(template).fit(list(seen))
            else:
                replay = buffer if uses_buffer else None
                if t == 0:
                    est.fit(train, replay=replay)
                else:
                    bank = "incremental" if cfg.strategy == "cl_bank" else "replace"
                    est.partial_fit(train, replay=replay, bank=bank)
                if uses_buffer:
                    buffer.update_after_task(train, t)
        seconds = time.perf_counter() - start
        events.append({"task": t, "phase": "train", "seconds": seconds})
        if hasattr(est, "consumed_"):
            consumed.append(sorted({int(x) for b in est.consumed_ for x in b}))
            est.consumed_ = []
        log.info("%s/%s seed %d: task %d (%s) trained in %s", cfg.method, cfg.strategy, seed, t,
                 task.name, format_seconds(seconds))
        if evaluate_now:
            start = time.perf_counter()
            with access.during("eval"):
                _evaluate(est, stream, t, cfg, matrices)
            events.append({"task": t, "phase": "eval", "seconds": time.perf_counter() - start})
    leaked = access.reads("train", "test")
    if leaked:
        raise RuntimeError(f"training read test splits of tasks {sorted(set(leaked))}")
    record = RunRecord(
        config=cfg.to_dict(),
        seed=seed,
        matrices=matrices,
        memory=memory_report(est, buffer if uses_buffer else None),
        timing=timing_report(events),
        provenance=provenance_hash(cfg, seed),
        stream_digest=stream.digest(),
        task_names=stream.names,
        events=events,
        consumed=consumed,
    )
    if save:
        record.save(out_dir)
    return record


def run_all(cfg: ExperimentConfig) -> list[RunRecord]:
    return [run_experiment(cfg, seed) for seed in cfg.seeds]


# -- reporting ------------------------------------------------------------------

TABLE_ROWS = (
    ("Image AUROC", "image_auroc"),
    ("Image f1", "image_f1"),
    ("Pixel AUROC", "pixel_auroc"),
    ("Pixel f1", "pixel_f1"),
    ("Pixel PR AUC", "pixel_pr_auc"),
    ("Pixel AUPRO", "aupro"),
    ("Training time", "time"),
    ("Architecture memory [MB]", "architecture_mb"),
    ("Additional memory [MB]", "additional_mb"),
    ("Relative gap [%]", "gap"),
    ("Average forgetting [%]", "forgetting"),
)


def load_records(results_dir) -> list[RunRecord]:
    results_dir = Path(results_dir)
    dirs = sorted(p.parent for p in results_dir.glob("*/record.json"))
    if (results_dir / "record.json").exists():
        dirs.insert(0, results_dir)
    if not dirs:
        raise ReportError(f"no run records found in {results_dir}")
    return [RunRecord.load(d) for d in dirs]


def _group(records):
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.method, r.strategy), []).append(r)
    return groups


def _final(rec: RunRecord, metric: str) -> float:
    R = rec.matrices.get(metric)
    return np.nan if R is None else average_over_tasks(R)


def _forgetting(rec: RunRecord, metric: str) -> float:
    R = rec.matrices.get(metric)
    if R is None or not R.is_complete():
        return np.nan
    try:
        return average_forgetting(R)
    except ValueError:
        return np.nan


def summarize(records: Sequence[RunRecord]) -> dict:
    """Seed-averaged Table-1 quantities per (method, strategy)."""
    records = list(records)
    if not records:
        raise ReportError("no records to report")
    digests = {r.stream_digest for r in records}
    if len(digests) > 1:
        raise ReportError("records come from different task streams; refusing to merge")
    groups = _group(records)
    columns = {}
    for (method, strategy), recs in groups.items():
        cl_metric = recs[0].config.get("cl_metric", "pixel_f1")
        col = {}
        for _, key in TABLE_ROWS[:6]:
            col[key] = float(np.mean([_final(r, key) for r in recs]))
        col["time"] = float(np.mean([r.timing["total"] for r in recs]))
        col["architecture_mb"] = float(np.mean([r.memory.architecture_mb for r in recs]))
        col["additional_mb"] = float(np.mean([r.memory.additional_mb for r in recs]))
        col["forgetting"] = float(np.mean([_forgetting(r, cl_metric) for r in recs]))
        joint = groups.get((method, "joint"))
        col["gap"] = np.nan
        if joint:
            joint_final = float(np.mean([_final(r, cl_metric) for r in joint]))
            if joint_final > 0:
                col["gap"] = relative_gap(float(np.mean([_final(r, cl_metric) for r in recs])), joint_final)
        col["n_seeds"] = len(recs)
        columns[f"{method}/{strategy}"] = col
    return columns


def _fmt(key, value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    if key == "time":
        return format_seconds(value)
    if key in ("gap", "forgetting"):
        return f"{value:.2f}%"
    if key.endswith("_mb"):
        return f"{value:.1f}"
    return f"{value:.2f}"


def format_table(columns: dict) -> tuple[list[str], list[list[str]]]:
    header = ["Metric"] + list(columns)
    rows = [[label] + [_fmt(key, columns[c].get(key)) for c in columns] for label, key in TABLE_ROWS]
    return header, rows


def _markdown(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def plot_curves(records: Sequence[RunRecord], out_dir, metric: str = "pixel_f1") -> list[Path]:
    """One PNG per method: average-so-far ``metric`` vs. tasks seen, a line per strategy."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    by_method: dict[str, dict[str, list]] = {}
    for (method, strategy), recs in _group(records).items():
        curves = [average_so_far(r.matrices[metric]) for r in recs if metric in r.matrices]
        if curves:
            with warnings.catch_warnings():  # joint rows without a prefix run are all-NaN
                warnings.simplefilter("ignore", RuntimeWarning)
                by_method.setdefault(method, {})[strategy] = np.nanmean(np.stack(curves), axis=0)
    for method, curves in sorted(by_method.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for strategy, curve in sorted(curves.items()):
            x = np.arange(1, len(curve) + 1)
            ok = np.isfinite(curve)
            ax.plot(x[ok], curve[ok], marker="o", label=strategy)
        ax.set_xlabel("tasks seen")
        ax.set_ylabel(f"average {metric}")
        ax.set_title(method)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"curve_{method}_{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def report(records: Sequence[RunRecord], out_dir) -> dict:
    """Write ``table.csv``, ``table.md`` and per-method curve PNGs into ``out_dir``."""
    import csv

    columns = summarize(records)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header, rows = format_table(columns)
    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    (out_dir / "table.md").write_text(_markdown(header, rows))
    (out_dir / "summary.json").write_text(json.dumps(columns, indent=2, default=float))
    cl_metric = records[0].config.get("cl_metric", "pixel_f1")
    plots = plot_curves(records, out_dir, cl_metric)
    return {"table": out_dir / "table.csv", "markdown": out_dir / "table.md", "plots": plots,
            "columns": columns}

