"""Method name to estimator class."""
from __future__ import annotations

import importlib

_CLASSES = {
    "draem": "clpad.trainable.draem:DRAEM",
    "stfpm": "clpad.trainable.stfpm:STFPM",
    "efficientad": "clpad.trainable.efficientad:EfficientAD",
    "fastflow": "clpad.trainable.fastflow:FastFlow",
    "padim": "clpad.gaussian:PaDiM",
    "patchcore": "clpad.coreset:PatchCore",
    "cfa": "clpad.cfa:CFA",
}

# Budgets that fit a 3-task, 64x64 synthetic stream on one CPU core.
DESK_PARAMS = {
    "draem": {"epochs": 10},
    "stfpm": {"epochs": 20},
    "efficientad": {"epochs": 30, "distill_epochs": 60, "hard_quantile": 0.9},
    "fastflow": {"epochs": 10, "flow_steps": 4},
    "padim": {},
    "patchcore": {"bank_capacity": 3000},
    "cfa": {"epochs": 10},
}


def estimator_class(method: str):
    try:
        module, name = _CLASSES[method].split(":")
    except KeyError:
        raise KeyError(f"unknown method {method!r}") from None
    return getattr(importlib.import_module(module), name)


def make_estimator(method: str, params=None, backbone=None, random_state: int = 0):
    cls = estimator_class(method)
    kwargs = dict(params or {})
    if backbone is not None and "backbone" in cls().get_params():
        kwargs.setdefault("backbone", backbone)
    return cls(random_state=random_state, **kwargs)
