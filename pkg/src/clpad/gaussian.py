"""PaDiM: per-position Gaussians over patch embeddings, merged across tasks."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .base import BaseAnomalyDetector, postprocess
from .features import PatchEmbedding, concat_multiscale, make_extractor


def _stack_embeddings(embeddings) -> np.ndarray:
    if isinstance(embeddings, PatchEmbedding):
        return embeddings.grid
    embeddings = list(embeddings)
    if not embeddings:
        raise ValueError("no embeddings given")
    return np.concatenate([e.grid for e in embeddings])


@dataclass
class GaussianBank:
    """Mean and covariance of the patch embedding at every grid position.

    ``means`` is (Hf, Wf, d) and ``covariances`` (Hf, Wf, d, d), the latter
    already including the ``epsilon * I`` regulariser.
    """

    means: np.ndarray
    covariances: np.ndarray
    epsilon: float = 0.01
    tasks_merged: int = 1
    reduced_dims: Optional[np.ndarray] = None
    _inverse: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.means.shape[:2]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @classmethod
    def fit_task(cls, embeddings, epsilon: float = 0.01, reduced_dims=None) -> "GaussianBank":
        x = _stack_embeddings(embeddings).astype(np.float64)
        if reduced_dims is not None:
            reduced_dims = np.asarray(reduced_dims, dtype=np.int64)
            x = x[..., reduced_dims]
        n, h, w, d = x.shape
        if n < 2:
            raise ValueError("need at least 2 training images for a sample covariance")
        x = x.reshape(n, h * w, d)
        mean = x.mean(axis=0)
        cov = np.empty((h * w, d, d))
        eye = epsilon * np.eye(d)
        chunk = max(1, 2**24 // max(1, n * d))
        for p in range(0, h * w, chunk):
            c = x[:, p : p + chunk] - mean[p : p + chunk]
            cov[p : p + chunk] = np.einsum("npi,npj->pij", c, c) / (n - 1) + eye
        return cls(mean.reshape(h, w, d), cov.reshape(h, w, d, d), float(epsilon), 1, reduced_dims)

    def merge_incremental(self, new_task: "GaussianBank", mode: str = "average") -> "GaussianBank":
        """Running average of the parameters; ``new_task`` holds one task.

        ``mode="moment"`` additionally adds the between-task mean scatter to
        the covariance so the result matches the moments of the pooled data.
        """
        if self.means.shape != new_task.means.shape:
            raise ValueError(f"grid/dim mismatch: {self.means.shape} vs {new_task.means.shape}")
        if self.epsilon != new_task.epsilon:
            raise ValueError("banks use different epsilon")
        if new_task.tasks_merged != 1:
            raise ValueError("new_task must be a single-task bank")
        n = self.tasks_merged
        mean = (n * self.means + new_task.means) / (n + 1)
        cov = (n * self.covariances + new_task.covariances) / (n + 1)
        if mode == "moment":
            diff = self.means - new_task.means
            cov = cov + n / (n + 1) ** 2 * np.einsum("hwi,hwj->hwij", diff, diff)
        elif mode != "average":
            raise ValueError(f"unknown merge mode {mode!r}")
        return GaussianBank(mean, cov, self.epsilon, n + 1, self.reduced_dims)

    def inverse(self) -> np.ndarray:
        if self._inverse is None:
            cov = self.covariances.reshape(-1, self.dim, self.dim)
            # cholesky surfaces non-PD matrices as LinAlgError
            np.linalg.cholesky(cov)
            inv = np.linalg.inv(cov)
            if not np.isfinite(inv).all():
                raise FloatingPointError("covariance inverse is not finite")
            self._inverse = inv.reshape(self.covariances.shape)
        return self._inverse

    def mahalanobis(self, embeddings) -> np.ndarray:
        """Distance map (N, Hf, Wf) of each patch from its position's Gaussian."""
        x = _stack_embeddings(embeddings).astype(np.float64)
        if self.reduced_dims is not None and x.shape[-1] != self.dim:
            x = x[..., self.reduced_dims]
        if x.shape[1:] != self.means.shape:
            raise ValueError(f"embedding grid {x.shape[1:]} does not match bank {self.means.shape}")
        delta = x - self.means
        sq = np.einsum("nhwi,hwij,nhwj->nhw", delta, self.inverse(), delta)
        return np.sqrt(np.maximum(sq, 0.0))

    def score(self, embeddings, output_size, smoothing_sigma: float):
        maps = postprocess(self.mahalanobis(embeddings), output_size, smoothing_sigma)
        return maps, maps.reshape(len(maps), -1).max(axis=1)

    # -- serialisation ------------------------------------------------------

    _HEAD = struct.Struct("<IIIdII")

    def to_bytes(self) -> bytes:
        """Header (Hf, Wf, d, eps, N, n_reduced) + reduced dims + float32 arrays."""
        h, w = self.grid_shape
        dims = np.asarray([] if self.reduced_dims is None else self.reduced_dims, dtype="<u4")
        head = self._HEAD.pack(h, w, self.dim, self.epsilon, self.tasks_merged, len(dims))
        return (
            head
            + dims.tobytes()
            + self.means.astype("<f4").tobytes()
            + self.covariances.astype("<f4").tobytes()
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "GaussianBank":
        h, w, d, eps, n, k = cls._HEAD.unpack_from(buf, 0)
        off = cls._HEAD.size
        dims = np.frombuffer(buf, "<u4", k, off).astype(np.int64) if k else None
        off += 4 * k
        means = np.frombuffer(buf, "<f4", h * w * d, off).reshape(h, w, d)
        off += 4 * h * w * d
        cov = np.frombuffer(buf, "<f4", h * w * d * d, off).reshape(h, w, d, d)
        return cls(means.astype(np.float64), cov.astype(np.float64), eps, n, dims)

    def n_floats(self) -> int:
        return self.means.size + self.covariances.size


def fit_task(embeddings, epsilon=0.01, reduced_dims=None) -> GaussianBank:
    return GaussianBank.fit_task(embeddings, epsilon, reduced_dims)


def merge_incremental(old: GaussianBank, new_task: GaussianBank, mode="average") -> GaussianBank:
    return old.merge_incremental(new_task, mode)


def score(bank: GaussianBank, embeddings, output_size, smoothing_sigma):
    return bank.score(embeddings, output_size, smoothing_sigma)


class PaDiM(BaseAnomalyDetector):
    """PaDiM with constant-memory continual updates.

    Parameters
    ----------
    backbone : str or FeatureExtractor
        Feature extractor (see :func:`clpad.features.make_extractor`).
    layers : sequence of str
        Layers concatenated into the patch embedding.
    n_dims : int
        Size of the random channel subset, drawn once on the first task and
        reused afterwards so that merged banks share one subspace.
    epsilon : float
        Diagonal covariance regulariser.
    merge : {"average", "moment"}
        Parameter averaging, or averaging plus between-task scatter.
    smoothing_sigma : float or None
        Gaussian smoothing of the upsampled map; ``None`` scales 4 px at 256.
    """

    memory_bank = True

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer1", "layer2", "layer3"),
        n_dims: int = 100,
        epsilon: float = 0.01,
        merge: str = "average",
        smoothing_sigma: Optional[float] = None,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.n_dims = n_dims
        self.epsilon = epsilon
        self.merge = merge
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        self.extractor_ = make_extractor(self.backbone, self.random_state)
        self.reduced_dims_ = None
        self.bank_ = None

    def _embed(self, images) -> PatchEmbedding:
        return concat_multiscale(self.extractor_.extract(images, self.layers))

    def _learn_task(self, samples, replay, bank):
        if replay is not None and len(replay) and bank == "replace":
            samples = samples + [s for t in replay.task_ids for s in replay.stores[t]]
        self.consumed_.append(np.array([s.task_id for s in samples]))
        emb = self._embed(np.stack([s.image for s in samples]))
        if self.reduced_dims_ is None:
            rng = np.random.default_rng(self.random_state)
            k = min(self.n_dims, emb.dim)
            self.reduced_dims_ = np.sort(rng.choice(emb.dim, k, replace=False))
        new = GaussianBank.fit_task(emb, self.epsilon, self.reduced_dims_)
        if bank == "incremental" and self.bank_ is not None:
            self.bank_ = self.bank_.merge_incremental(new, self.merge)
        else:
            self.bank_ = new
        self.bank_.inverse()

    def _sigma(self, h):
        return self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256

    def _score_images(self, images):
        return self.bank_.score(self._embed(images), images.shape[1:3], self._sigma(images.shape[1]))

    def n_parameters(self):
        return self.extractor_.n_parameters()

    def additional_floats(self):
        return self.bank_.n_floats() if self.bank_ is not None else 0
