"""PatchCore with a capacity-bounded, per-task partitioned memory bank."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.random_projection import SparseRandomProjection

from .base import BaseAnomalyDetector, postprocess
from .features import (
    PatchEmbedding,
    concat_multiscale,
    embeddings_from_bytes,
    embeddings_to_bytes,
    local_average,
    make_extractor,
)


def greedy_coreset(patches, m: int, seed: int = 0, start: Optional[int] = None,
                   projection_dim: Optional[int] = None) -> np.ndarray:
    """Farthest-point (k-center greedy) selection of ``m`` row indices.

    Starts from ``start`` (or a seeded random row) and repeatedly adds the row
    farthest from its nearest selected row.  With ``projection_dim`` the
    distances are computed on a seeded sparse random projection; the returned
    indices still refer to ``patches``.
    """
    x = np.asarray(patches)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("greedy_coreset needs a non-empty (n, d) patch array")
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(x)
    if m >= n:
        return np.arange(n)
    if projection_dim is not None and x.shape[1] > projection_dim:
        x = SparseRandomProjection(projection_dim, random_state=seed).fit_transform(x)
    x = np.asarray(x, dtype=np.float64)
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_dist = np.linalg.norm(x - x[start], axis=1)
    for i in range(1, m):
        idx = int(np.argmax(min_dist))
        selected[i] = idx
        np.minimum(min_dist, np.linalg.norm(x - x[idx], axis=1), out=min_dist)
    return selected


def covering_radius(points, centers_idx) -> float:
    points = np.asarray(points, dtype=np.float64)
    d = np.linalg.norm(points[:, None] - points[np.asarray(centers_idx)][None], axis=-1)
    return float(d.min(axis=1).max())


def nearest_neighbors(queries, bank, chunk: int = 2048):
    """Exact nearest bank row for every query: (distances, indices)."""
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(bank, dtype=np.float64)
    if len(b) == 0:
        raise ValueError("empty bank")
    b_sq = (b**2).sum(1)
    idx = np.empty(len(q), dtype=np.int64)
    for k in range(0, len(q), chunk):
        qc = q[k : k + chunk]
        d2 = (qc**2).sum(1)[:, None] + b_sq[None] - 2.0 * qc @ b.T
        idx[k : k + chunk] = d2.argmin(1)
    dist = np.linalg.norm(q - b[idx], axis=1)
    return dist, idx


class CoresetBank:
    """Patch memory of capacity ``M`` split into equal per-task stores.

    After the N-th task every store holds ``M // N`` patches (or all of its
    task's patches if fewer), obtained by re-applying greedy coreset
    selection to the store's current contents.
    """

    def __init__(self, capacity: int, neighbor_k: int = 9, projection_dim: Optional[int] = 128,
                 projection_seed: int = 0):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = int(capacity)
        self.neighbor_k = neighbor_k
        self.projection_dim = projection_dim
        self.projection_seed = projection_seed
        self.stores: dict[int, np.ndarray] = {}
        self._memory = None

    @property
    def dim(self) -> Optional[int]:
        for v in self.stores.values():
            return v.shape[1]
        return None

    def __len__(self):
        return sum(len(v) for v in self.stores.values())

    def quota(self, n_tasks: int) -> int:
        return self.capacity // n_tasks

    def _select(self, patches, m, task_id, n_tasks):
        seed = self.projection_seed + 7919 * task_id + n_tasks
        keep = greedy_coreset(patches, m, seed=seed, projection_dim=self.projection_dim)
        return patches[np.sort(keep)]

    def update_after_task(self, task_patches, task_id: int) -> "CoresetBank":
        if task_id in self.stores:
            raise ValueError(f"task {task_id} already in bank")
        patches = np.asarray(task_patches, dtype=np.float32)
        if patches.ndim != 2 or len(patches) == 0:
            raise ValueError("task_patches must be a non-empty (n, d) array")
        if self.dim is not None and patches.shape[1] != self.dim:
            raise ValueError(f"patch dim {patches.shape[1]} != bank dim {self.dim}")
        n_tasks = len(self.stores) + 1
        if self.capacity < n_tasks:
            raise ValueError(f"capacity {self.capacity} < number of tasks {n_tasks}: quota is zero")
        m = self.quota(n_tasks)
        for t, store in self.stores.items():
            if len(store) > m:
                self.stores[t] = self._select(store, m, t, n_tasks)
        self.stores[task_id] = self._select(patches, m, task_id, n_tasks)
        self._memory = None
        return self

    def memory(self) -> np.ndarray:
        if self._memory is None:
            if not self.stores:
                raise ValueError("empty bank")
            self._memory = np.concatenate([self.stores[t] for t in sorted(self.stores)])
        return self._memory

    def score(self, embeddings: PatchEmbedding, output_size, smoothing_sigma: float,
              reweight: bool = False):
        """Nearest-neighbour distance map and image scores.

        The image score is the largest patch distance; with ``reweight`` it
        is scaled by the neighbourhood weight of the original PatchCore.
        """
        if not self.stores:
            raise ValueError("empty bank")
        grid = embeddings.grid
        n, h, w, d = grid.shape
        if d != self.dim:
            raise ValueError(f"embedding dim {d} != bank dim {self.dim}")
        dist, idx = nearest_neighbors(grid.reshape(-1, d), self.memory())
        dist = dist.reshape(n, h * w)
        image_scores = dist.max(axis=1)
        if reweight:
            image_scores = self._reweight(grid.reshape(n, h * w, d), dist, idx.reshape(n, h * w))
        maps = postprocess(dist.reshape(n, h, w), output_size, smoothing_sigma)
        return maps, image_scores

    def _reweight(self, patches, dist, idx):
        bank = self.memory().astype(np.float64)
        k = min(self.neighbor_k, len(bank))
        out = np.empty(len(patches))
        for i in range(len(patches)):
            j = int(dist[i].argmax())
            test_patch = patches[i, j].astype(np.float64)
            anchor = bank[idx[i, j]]
            nn = np.argsort(np.linalg.norm(bank - anchor, axis=1))[:k]
            d_nn = np.linalg.norm(bank[nn] - test_patch, axis=1)
            # softmax weight of the anchor among its neighbourhood; shift for stability
            z = np.exp(d_nn - d_nn.max())
            w = 1.0 - np.exp(dist[i, j] - d_nn.max()) / z.sum()
            out[i] = w * dist[i, j]
        return out

    def n_floats(self) -> int:
        return sum(v.size for v in self.stores.values())

    # -- checkpoint ---------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for t, store in self.stores.items():
            emb = PatchEmbedding(store[None, :, None, :], ["coreset"], 1)
            (directory / f"task_{t:03d}.bin").write_bytes(embeddings_to_bytes(emb))
        manifest = {
            "capacity": self.capacity,
            "n_tasks": len(self.stores),
            "dim": self.dim,
            "neighbor_k": self.neighbor_k,
            "projection_dim": self.projection_dim,
            "projection_seed": self.projection_seed,
            "tasks": sorted(self.stores),
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "CoresetBank":
        directory = Path(directory)
        m = json.loads((directory / "manifest.json").read_text())
        bank = cls(m["capacity"], m["neighbor_k"], m["projection_dim"], m["projection_seed"])
        for t in m["tasks"]:
            emb = embeddings_from_bytes((directory / f"task_{t:03d}.bin").read_bytes())
            bank.stores[int(t)] = emb.grid[0, :, 0, :].copy()
        return bank


class PatchCore(BaseAnomalyDetector):
    """PatchCore whose bank capacity is shared equally among tasks.

    Parameters
    ----------
    backbone, layers :
        Feature extractor and the layers concatenated into patch features.
    bank_capacity : int
        Total number of stored patches ``M``.
    patch_size : int
        Local neighbourhood averaged into each patch feature.
    projection_dim : int or None
        Random projection used only for coreset distances.
    reweight : bool
        Use the neighbourhood-reweighted image score instead of the plain max.
    neighbor_k : int
        Neighbourhood size for reweighting.
    """

    memory_bank = True

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer2", "layer3"),
        bank_capacity: int = 30000,
        patch_size: int = 3,
        projection_dim: Optional[int] = 128,
        reweight: bool = False,
        neighbor_k: int = 9,
        smoothing_sigma: Optional[float] = None,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.bank_capacity = bank_capacity
        self.patch_size = patch_size
        self.projection_dim = projection_dim
        self.reweight = reweight
        self.neighbor_k = neighbor_k
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _new_bank(self):
        return CoresetBank(self.bank_capacity, self.neighbor_k, self.projection_dim, self.random_state)

    def _reset(self):
        self.extractor_ = make_extractor(self.backbone, self.random_state)
        self.bank_ = self._new_bank()
        self.next_task_id_ = 0

    def _embed(self, images) -> PatchEmbedding:
        emb = concat_multiscale(self.extractor_.extract(images, self.layers))
        return PatchEmbedding(local_average(emb.grid, self.patch_size), emb.source_layers, emb.stride)

    def _learn_task(self, samples, replay, bank):
        if replay is not None and len(replay) and bank == "replace":
            samples = samples + [s for t in replay.task_ids for s in replay.stores[t]]
        self.consumed_.append(np.array([s.task_id for s in samples]))
        patches = self._embed(np.stack([s.image for s in samples])).patches()
        if bank == "replace":
            self.bank_ = self._new_bank()
        self.bank_.update_after_task(patches, self.next_task_id_)
        self.next_task_id_ += 1

    def _sigma(self, h):
        return self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256

    def _score_images(self, images):
        return self.bank_.score(self._embed(images), images.shape[1:3], self._sigma(images.shape[1]),
                                self.reweight)

    def n_parameters(self):
        return self.extractor_.n_parameters()

    def additional_floats(self):
        return self.bank_.n_floats()
