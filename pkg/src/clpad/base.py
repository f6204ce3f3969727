"""Estimator base class and input validation shared by all detectors."""
from __future__ import annotations

import pickle
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch.nn import functional as F

from .replay import ReplayBuffer
from .taskstream import NORMAL, TRAIN, Sample, batched


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


def check_samples(X, task_id: int = 0) -> list[Sample]:
    """Coerce ``X`` to a list of :class:`Sample`.

    Accepts a list of samples or a uint8 image array (N, H, W, 3); raw arrays
    are wrapped as normal train samples of ``task_id``.
    """
    if isinstance(X, Sample):
        return [X]
    if isinstance(X, (list, tuple)) and X and all(isinstance(s, Sample) for s in X):
        return list(X)
    images = check_images(X)
    return [Sample(img, None, NORMAL, task_id, TRAIN) for img in images]


def check_images(X) -> np.ndarray:
    """Return ``X`` as a non-empty uint8 array of shape (N, H, W, 3)."""
    if isinstance(X, Sample):
        X = [X]
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], Sample):
        X = np.stack([s.image for s in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("received an empty image batch")
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.integer) or np.issubdtype(X.dtype, np.floating):
            if X.min() < 0 or X.max() > 255:
                raise ValueError("image intensities must lie in [0, 255]")
            X = X.astype(np.uint8)
        else:
            raise ValueError(f"unsupported image dtype {X.dtype}")
    return X


def check_finite(loss, what: str = "loss") -> float:
    value = float(loss)
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value}")
    return value


def upsample_maps(maps, out_hw) -> np.ndarray:
    """Bilinear resize of (N, h, w) maps to ``out_hw``."""
    t = maps if isinstance(maps, torch.Tensor) else torch.from_numpy(np.ascontiguousarray(maps))
    t = t.float()
    if tuple(t.shape[-2:]) != tuple(out_hw):
        t = F.interpolate(t[:, None], size=tuple(out_hw), mode="bilinear", align_corners=False)[:, 0]
    return t.numpy()


def smooth_maps(maps: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma or sigma <= 0:
        return maps
    return np.stack([gaussian_filter(m, sigma=sigma, truncate=4.0) for m in maps])


def postprocess(maps, out_hw, sigma) -> np.ndarray:
    return smooth_maps(upsample_maps(maps, out_hw), sigma)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


class BaseAnomalyDetector(BaseEstimator):
    """Pixel-level anomaly detector trained on a stream of tasks.

    ``fit`` starts from the stream-start initialisation and learns the first
    task; ``partial_fit`` continues with the next task.  Both accept a list of
    :class:`Sample` or a uint8 image array and an optional
    :class:`ReplayBuffer` whose contents are mixed into training.

    ``bank`` selects how memory-bank methods absorb a new task: the
    continual update (``"incremental"``) or refit-and-replace
    (``"replace"``).  Gradient-trained methods ignore it.
    """

    memory_bank = False

    def fit(self, X, replay: Optional[ReplayBuffer] = None):
        self._reset()
        self.tasks_seen_ = 0
        self.consumed_ = []
        self._learn_task(check_samples(X), replay, bank="replace")
        self.tasks_seen_ = 1
        return self

    def partial_fit(self, X, replay: Optional[ReplayBuffer] = None, bank: str = "incremental"):
        if bank not in ("incremental", "replace"):
            raise ValueError(f"bank must be 'incremental' or 'replace', got {bank!r}")
        if not hasattr(self, "tasks_seen_"):
            return self.fit(X, replay)
        self._learn_task(check_samples(X), replay, bank=bank)
        self.tasks_seen_ += 1
        return self

    def _check_fitted(self):
        if not hasattr(self, "tasks_seen_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def predict_maps(self, X):
        """Return ``(maps, image_scores)``; maps are (N, H, W), higher = more anomalous."""
        self._check_fitted()
        images = check_images(X)
        maps = []
        scores = []
        for k in range(0, len(images), self._score_batch):
            m, s = self._score_images(images[k : k + self._score_batch])
            maps.append(m)
            scores.append(s)
        maps = np.concatenate(maps).astype(np.float32)
        scores = np.concatenate(scores).astype(np.float64)
        if not (np.isfinite(maps).all() and np.isfinite(scores).all()):
            raise FloatingPointError(f"{type(self).__name__} produced non-finite anomaly scores")
        return maps, scores

    def anomaly_maps(self, X) -> np.ndarray:
        return self.predict_maps(X)[0]

    def score_samples(self, X) -> np.ndarray:
        return self.predict_maps(X)[1]

    _score_batch = 16

    # -- hooks --------------------------------------------------------------

    def _reset(self):
        raise NotImplementedError

    def _learn_task(self, samples: list[Sample], replay, bank: str):
        raise NotImplementedError

    def _score_images(self, images: np.ndarray):
        raise NotImplementedError

    def n_parameters(self) -> int:
        """Trainable plus frozen parameters (architecture memory)."""
        return 0

    def additional_floats(self) -> int:
        """Floats held in memory banks (additional memory)."""
        return 0

    # -- persistence --------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            pickle.dump(self, fh)
        return path

    @staticmethod
    def load(path) -> "BaseAnomalyDetector":
        with open(path, "rb") as fh:
            return pickle.load(fh)


class TorchTrainingMixin:
    """Epoch loop over (optionally replay-mixed) batches for torch methods.

    Subclasses implement ``_train_step(images, samples) -> loss tensor``; the
    mixin owns batching, replay mixing, the optimizer step, divergence checks
    and the consumed-sample log (task ids of every trained batch).
    """

    def _run_epochs(self, samples, replay, epochs, optimizer, seed, params=None):
        history = []
        for epoch in range(epochs):
            losses = []
            for batch in batched(samples, self.batch_size, seed * 100_003 + epoch):
                if replay is not None and len(replay):
                    batch = replay.mixed_batch(batch)
                self.consumed_.append(np.array([s.task_id for s in batch]))
                images = np.stack([s.image for s in batch])
                optimizer.zero_grad()
                loss = self._train_step(images, batch)
                check_finite(loss.detach())
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
            history.append(float(np.mean(losses)))
        self.loss_history_.append(history)
        return history


def param_count(*modules) -> int:
    return sum(p.numel() for m in modules if m is not None for p in m.parameters())


def state_hash(*modules) -> str:
    import hashlib

    h = hashlib.sha256()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def as_list(x) -> list:
    if x is None:
        return []
    if isinstance(x, (str, bytes)):
        return [x]
    return list(x) if isinstance(x, Sequence) else [x]
