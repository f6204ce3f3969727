"""Image-, pixel- and continual-learning metrics plus memory/time accounting."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import label as label_components
from scipy.stats import rankdata

IMAGE_METRICS = ("image_auroc", "image_f1")
PIXEL_METRICS = ("pixel_auroc", "pixel_f1", "pixel_pr_auc", "aupro")
ALL_METRICS = IMAGE_METRICS + PIXEL_METRICS

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return scores, labels


def _threshold_counts(scores, labels):
    """TP and predicted-positive counts at every distinct threshold, descending.

    A sample is predicted positive when its score is >= the threshold.
    """
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    return s[ends], tp, predicted


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties averaged)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_max(scores, labels) -> tuple[float, float]:
    """Best F1 over all distinct-score thresholds and the (lowest) threshold achieving it."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("f1_max needs at least one positive label")
    thresholds, tp, predicted = _threshold_counts(scores, labels)
    f1 = 2.0 * tp / (predicted + n_pos)
    best = f1.max()
    # thresholds are descending: the last maximiser is the lowest threshold
    k = int(np.flatnonzero(f1 == best)[-1])
    return float(best), float(thresholds[k])


def pr_auc(scores, labels) -> float:
    """Step-wise area under the precision-recall curve (average precision)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive label")
    _, tp, predicted = _threshold_counts(scores, labels)
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def _regions(masks):
    """Per-pixel region ids (0 = normal) using 8-connected components per mask."""
    ids = np.zeros(masks.shape, dtype=np.int64)
    offset = 0
    for i, m in enumerate(masks):
        lab, n = label_components(m != 0, structure=_EIGHT_CONNECTED)
        ids[i] = np.where(lab > 0, lab + offset, 0)
        offset += n
    return ids, offset


def pro_curve(maps, masks):
    """(fpr, pro) at every distinct threshold, starting from the (0, 0) point."""
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks)
    if maps.shape != masks.shape:
        raise ValueError(f"maps {maps.shape} and masks {masks.shape} differ")
    if maps.ndim == 2:
        maps, masks = maps[None], masks[None]
    ids, n_regions = _regions(masks)
    if n_regions == 0:
        raise ValueError("aupro needs at least one anomalous pixel")
    ids = ids.ravel()
    normal = ids == 0
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise ValueError("aupro needs at least one normal pixel")
    areas = np.bincount(ids, minlength=n_regions + 1).astype(np.float64)
    weights = np.zeros(len(ids))
    weights[~normal] = 1.0 / (n_regions * areas[ids[~normal]])

    scores = maps.ravel()
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    ends = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    fpr = np.cumsum(normal[order])[ends] / n_normal
    pro = np.cumsum(weights[order])[ends]
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def integrate_limited(x, y, limit: float) -> float:
    """Trapezoid area under the piecewise-linear (x, y) curve on [0, limit]."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    area = 0.0
    for k in range(1, len(x)):
        x0, x1, y0, y1 = x[k - 1], x[k], y[k - 1], y[k]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += 0.5 * (x1 - x0) * (y0 + y1)
    return area


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(maps, masks)
    return float(integrate_limited(fpr, pro, fpr_limit) / fpr_limit)


def image_metrics(scores, labels) -> dict:
    return {"image_auroc": auroc(scores, labels), "image_f1": f1_max(scores, labels)[0]}


def pixel_metrics(maps, masks, pooling: str = "task", fpr_limit: float = 0.3) -> dict:
    """Pixel AUROC / max-F1 / PR AUC and AUPRO.

    ``pooling="task"`` pools every test pixel of the task into one set;
    ``"image"`` averages per-image values over images that contain both
    classes (AUPRO stays pooled, as it already weights regions equally).
    """
    maps = np.asarray(maps)
    masks = np.asarray(masks)
    out = {"aupro": aupro(maps, masks, fpr_limit)}
    if pooling == "task":
        s, y = maps.ravel(), masks.ravel() != 0
        out["pixel_auroc"] = auroc(s, y)
        out["pixel_f1"] = f1_max(s, y)[0]
        out["pixel_pr_auc"] = pr_auc(s, y)
    elif pooling == "image":
        rows = [
            (auroc(m, k), f1_max(m, k)[0], pr_auc(m, k))
            for m, k in zip(maps, masks)
            if 0 < (k != 0).sum() < k.size
        ]
        out["pixel_auroc"], out["pixel_f1"], out["pixel_pr_auc"] = map(float, np.mean(rows, axis=0))
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return out


def evaluate_task(maps, image_scores, masks, labels, metrics: Sequence[str] = ALL_METRICS,
                  pooling: str = "task") -> dict:
    out = {}
    if any(m in IMAGE_METRICS for m in metrics):
        out.update(image_metrics(image_scores, labels))
    if any(m in PIXEL_METRICS for m in metrics):
        out.update(pixel_metrics(maps, masks, pooling))
    return {m: out[m] for m in metrics}


# -- continual-learning metrics ---------------------------------------------


class ResultMatrix:
    """``values[t, i]``: metric on task ``i`` after training through task ``t``.

    Entries with ``i > t`` (and anything not evaluated) are NaN.
    """

    def __init__(self, n_tasks: int, metric_name: str, values: Optional[np.ndarray] = None,
                 metadata: Optional[dict] = None):
        self.metric_name = metric_name
        self.values = np.full((n_tasks, n_tasks), np.nan) if values is None else np.asarray(values, float)
        if self.values.shape != (n_tasks, n_tasks):
            raise ValueError("values must be a T x T array")
        self.metadata = dict(metadata or {})

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def __setitem__(self, key, value):
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def is_complete(self) -> bool:
        return bool(np.isfinite(self.values[np.tril_indices(self.n_tasks)]).all())

    def __eq__(self, other):
        if not isinstance(other, ResultMatrix):
            return NotImplemented
        return self.metric_name == other.metric_name and np.array_equal(
            self.values, other.values, equal_nan=True
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{i}" for i in range(self.n_tasks)])
        for t, row in enumerate(self.values):
            writer.writerow([t] + ["" if np.isnan(v) else repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metric_name: str) -> "ResultMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        values = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows])
        return cls(len(rows), metric_name, values)

    def to_json(self) -> str:
        payload = {
            "metric": self.metric_name,
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
            "metadata": self.metadata,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ResultMatrix":
        payload = json.loads(text)
        values = np.array([[np.nan if v is None else v for v in row] for row in payload["values"]], float)
        return cls(len(values), payload["metric"], values, payload.get("metadata"))

    def save(self, directory) -> None:
        directory = Path(directory)
        (directory / f"R_{self.metric_name}.csv").write_text(self.to_csv())
        (directory / f"R_{self.metric_name}.json").write_text(self.to_json())

    def __repr__(self):
        return f"ResultMatrix({self.metric_name!r}, T={self.n_tasks})"


def _values(R) -> np.ndarray:
    return R.values if isinstance(R, ResultMatrix) else np.asarray(R, dtype=np.float64)


def average_over_tasks(R) -> float:
    """Mean of the last row: every task's metric at the end of the stream."""
    v = _values(R)
    return float(np.mean(v[-1]))


def average_so_far(R) -> np.ndarray:
    """Curve of the mean over tasks 0..t after training through task t."""
    v = _values(R)
    return np.array([np.mean(v[t, : t + 1]) for t in range(len(v))])


def average_forgetting(R) -> float:
    """Mean relative drop (in %) from just-learned to end-of-stream performance.

    Negative values mean old tasks improved.  NaN for a single-task stream.
    """
    v = _values(R)
    n = len(v)
    if n < 2:
        return float("nan")
    diag = np.diag(v)[: n - 1]
    if np.any(diag == 0):
        raise ValueError("forgetting is undefined when a diagonal entry is 0")
    return float(np.mean(100.0 * (diag - v[-1, : n - 1]) / diag))


def relative_gap(cl_final: float, joint_final: float) -> float:
    """Relative shortfall (in %) of a continual strategy versus joint training."""
    if joint_final <= 0:
        raise ValueError("joint_final must be positive")
    return 100.0 * (joint_final - cl_final) / joint_final


# -- memory and time ----------------------------------------------------------

BYTES_PER_FLOAT = 4
MB = 1e6


@dataclass(frozen=True)
class MemoryReport:
    architecture_mb: float
    additional_mb: float

    def __post_init__(self):
        if self.architecture_mb < 0 or self.additional_mb < 0:
            raise ValueError("memory figures must be nonnegative")

    @property
    def total_mb(self) -> float:
        return self.architecture_mb + self.additional_mb

    def as_dict(self) -> dict:
        return {
            "architecture_mb": self.architecture_mb,
            "additional_mb": self.additional_mb,
            "total_mb": self.total_mb,
        }


def memory_report(method_state=None, strategy_state=None) -> MemoryReport:
    """Architecture memory from parameter counts, additional memory from stores.

    ``method_state`` is a fitted detector (anything with ``n_parameters`` and
    ``additional_floats``); ``strategy_state`` a replay buffer or ``None``.
    Replay images count as raw 8-bit RGB, everything else as 32-bit floats.
    """
    arch = 0
    extra_bytes = 0
    if method_state is not None:
        arch = method_state.n_parameters() * BYTES_PER_FLOAT
        extra_bytes += method_state.additional_floats() * BYTES_PER_FLOAT
    if strategy_state is not None:
        if hasattr(strategy_state, "nbytes") and callable(strategy_state.nbytes):
            extra_bytes += strategy_state.nbytes()
        else:
            extra_bytes += strategy_state.n_floats() * BYTES_PER_FLOAT
    return MemoryReport(arch / MB, extra_bytes / MB)


def timing_report(run_log: Sequence[dict]) -> dict:
    """Aggregate ``{"task": t, "phase": "train", "seconds": s}`` events."""
    per_task: dict[int, float] = {}
    for event in run_log:
        if event.get("phase", "train") != "train":
            continue
        per_task[event["task"]] = per_task.get(event["task"], 0.0) + float(event["seconds"])
    tasks = sorted(per_task)
    per = [per_task[t] for t in tasks]
    return {
        "per_task": per,
        "cumulative": list(np.cumsum(per)) if per else [],
        "total": float(sum(per)),
    }


def format_seconds(seconds: float) -> str:
    seconds = int(round(seconds))
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    if h:
        return f"{h}h {m}min"
    if m:
        return f"{m}min {s}s"
    return f"{s}s"
