"""Experiment configuration: a flat, typed key-value schema.

Config files are flat YAML mappings.  Method hyperparameters use dotted keys
(``params.epochs: 10``) and are passed to the detector's constructor.  Every
key, its type and its default are listed in :data:`SCHEMA`.
"""
from __future__ import annotations

import dataclasses
import inspect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .metrics import ALL_METRICS

METHODS = ("draem", "stfpm", "efficientad", "padim", "patchcore", "cfa", "fastflow")
STRATEGIES = ("joint", "finetune", "replay", "cl_bank")
BANK_METHODS = ("padim", "patchcore", "cfa")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


@dataclass
class ExperimentConfig:
    method: str
    strategy: str
    stream: str = "synthetic"
    n_tasks: int = 3
    n_train: int = 20
    n_test: int = 10
    image_size: list = field(default_factory=lambda: [64, 64])
    stream_seed: int = 0
    defect_shift: int = 96
    noise_std: float = 3.0
    mvtec_root: Optional[str] = None
    categories: Optional[list] = None
    replay_capacity: Optional[int] = None
    bank_capacity: Optional[int] = None
    seeds: list = field(default_factory=lambda: [0])
    metrics: list = field(default_factory=lambda: list(ALL_METRICS))
    pooling: str = "task"
    cl_metric: str = "pixel_f1"
    joint_prefix: bool = False
    backbone: str = "random_conv"
    device: str = "cpu"
    threads: Optional[int] = 1
    output: str = "output"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        params = out.pop("params")
        out.update({f"params.{k}": v for k, v in sorted(params.items())})
        return out

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_DOC = {
    "method": "detector: " + ", ".join(METHODS),
    "strategy": "continual strategy: " + ", ".join(STRATEGIES),
    "stream": "'synthetic' or 'mvtec'",
    "n_tasks": "synthetic: number of tasks",
    "n_train": "synthetic: normal train images per task",
    "n_test": "synthetic: test images per task (>= 2)",
    "image_size": "[H, W] after resizing",
    "stream_seed": "synthetic: generator seed (kept fixed across run seeds)",
    "defect_shift": "synthetic: defect intensity shift, 64..128",
    "noise_std": "synthetic: pixel noise standard deviation",
    "mvtec_root": "mvtec: dataset root directory",
    "categories": "mvtec: ordered category list (default: the ten objects)",
    "replay_capacity": "replay buffer size in images (required for replay, and for cfa + cl_bank)",
    "bank_capacity": "patchcore: total bank size in patches",
    "seeds": "list of run seeds",
    "metrics": "metrics evaluated after every task: " + ", ".join(ALL_METRICS),
    "pooling": "pixel metric pooling: 'task' or 'image'",
    "cl_metric": "operand of the relative gap and forgetting in reports",
    "joint_prefix": "joint: retrain on every prefix (fills all rows) instead of only the full stream",
    "backbone": "feature extractor: random_conv, identity, random_projection, or a torchvision resnet name",
    "device": "torch device (only 'cpu' is exercised)",
    "threads": "torch intra-op threads (null leaves the torch default)",
    "output": "results root; each run writes <method>_<strategy>_seed<k>/",
    "params.<name>": "constructor argument of the chosen detector",
}


def _schema():
    rows = []
    for f in dataclasses.fields(ExperimentConfig):
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        rows.append((f.name, f.type, default, _DOC[f.name] if f.name in _DOC else ""))
    return rows


_TYPES = {
    "str": str, "int": int, "float": (int, float), "bool": bool, "list": list, "dict": dict,
    "Optional[str]": (str, type(None)), "Optional[int]": (int, type(None)), "Optional[list]": (list, type(None)),
}


def _check_types(cfg: ExperimentConfig):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        expected = _TYPES[f.type]
        if isinstance(value, bool) and f.type not in ("bool",):
            raise ConfigError(f"{f.name} must be {f.type}, got bool", f.name)
        if not isinstance(value, expected):
            raise ConfigError(f"{f.name} must be {f.type}, got {type(value).__name__}", f.name)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Raise :class:`ConfigError` on any invalid field or pairing."""
    _check_types(cfg)
    if cfg.method not in METHODS:
        raise ConfigError(f"unknown method {cfg.method!r}", "method")
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {cfg.strategy!r}", "strategy")
    if cfg.strategy == "cl_bank" and cfg.method not in BANK_METHODS:
        raise ConfigError(f"strategy cl_bank is only defined for {', '.join(BANK_METHODS)}", "strategy")
    needs_replay = cfg.strategy == "replay" or (cfg.strategy == "cl_bank" and cfg.method == "cfa")
    if needs_replay and cfg.replay_capacity is None:
        raise ConfigError(f"missing key replay_capacity (required for strategy={cfg.strategy}, "
                          f"method={cfg.method})", "replay_capacity")
    if cfg.replay_capacity is not None and cfg.replay_capacity <= 0:
        raise ConfigError("replay_capacity must be positive", "replay_capacity")
    if cfg.bank_capacity is not None:
        if cfg.method != "patchcore":
            raise ConfigError("bank_capacity only applies to patchcore", "bank_capacity")
        if cfg.bank_capacity <= 0:
            raise ConfigError("bank_capacity must be positive", "bank_capacity")
    if cfg.stream not in ("synthetic", "mvtec"):
        raise ConfigError(f"unknown stream {cfg.stream!r}", "stream")
    if cfg.stream == "mvtec" and not cfg.mvtec_root:
        raise ConfigError("missing key mvtec_root (required for stream=mvtec)", "mvtec_root")
    if len(cfg.image_size) != 2 or not all(isinstance(v, int) and v > 0 for v in cfg.image_size):
        raise ConfigError("image_size must be [H, W] with positive integers", "image_size")
    if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seeds must be a non-empty list of integers", "seeds")
    unknown = [m for m in cfg.metrics if m not in ALL_METRICS]
    if unknown or not cfg.metrics:
        raise ConfigError(f"unknown metrics {unknown}" if unknown else "metrics is empty", "metrics")
    if cfg.cl_metric not in ALL_METRICS:
        raise ConfigError(f"unknown cl_metric {cfg.cl_metric!r}", "cl_metric")
    if cfg.pooling not in ("task", "image"):
        raise ConfigError(f"unknown pooling {cfg.pooling!r}", "pooling")
    _check_params(cfg)
    return cfg


def _check_params(cfg: ExperimentConfig):
    from .registry import estimator_class

    accepted = inspect.signature(estimator_class(cfg.method).__init__).parameters
    for name in cfg.params:
        if name not in accepted or name == "self":
            raise ConfigError(f"{cfg.method} has no parameter {name!r}", f"params.{name}")
    if "random_state" in cfg.params:
        raise ConfigError("params.random_state is set from seeds", "params.random_state")


def from_mapping(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    names = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"params"}
    kwargs: dict[str, Any] = {}
    params: dict[str, Any] = dict(raw.get("params") or {}) if isinstance(raw.get("params"), dict) else {}
    for key, value in raw.items():
        if key == "params":
            continue
        if key.startswith("params."):
            params[key[len("params."):]] = value
        elif key in names:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}", key)
    for key in ("method", "strategy"):
        if key not in kwargs:
            raise ConfigError(f"missing key {key}", key)
    return ExperimentConfig(params=params, **kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", None) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}".replace("\n", " "), None) from None
    return from_mapping(raw if raw is not None else {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def schema_markdown() -> str:
    lines = ["| key | type | default | meaning |", "|---|---|---|---|"]
    for name, typ, default, doc in _schema():
        if name == "params":
            name, doc = "params.<name>", _DOC["params.<name>"]
        lines.append(f"| `{name}` | {typ} | `{default!r}` | {doc} |")
    return "\n".join(lines)
