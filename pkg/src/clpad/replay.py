"""Raw-image replay memory shared by the gradient-trained methods."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .taskstream import NORMAL, TRAIN, Sample


class EmptyBufferError(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity store of past-task training images.

    After every task the capacity is split as evenly as possible across all
    stored tasks (quotas differ by at most one image); older stores are
    down-sampled from their current contents, never refilled.

    Parameters
    ----------
    capacity : int
        Maximum number of images held over all tasks.
    seed : int
        Seed of the generator used for down-sampling, draws and shuffling.
    """

    def __init__(self, capacity: int, seed: int = 0):
        if int(capacity) <= 0:
            raise ValueError(f"replay capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.seed = seed
        self.stores: dict[int, list[Sample]] = {}
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return sum(len(v) for v in self.stores.values())

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.stores)

    def counts(self) -> dict[int, int]:
        return {t: len(v) for t, v in sorted(self.stores.items())}

    def quotas(self, n_tasks: int) -> list[int]:
        base, extra = divmod(self.capacity, n_tasks)
        return [base + (1 if i < extra else 0) for i in range(n_tasks)]

    def update_after_task(self, task_train: Sequence[Sample], task_id: int) -> "ReplayBuffer":
        if task_id in self.stores:
            raise ValueError(f"task {task_id} is already stored")
        task_ids = self.task_ids + [task_id]
        quotas = dict(zip(task_ids, self.quotas(len(task_ids))))
        for t in self.task_ids:
            store = self.stores[t]
            if len(store) > quotas[t]:
                keep = np.sort(self._rng.choice(len(store), quotas[t], replace=False))
                self.stores[t] = [store[i] for i in keep]
        task_train = list(task_train)
        q = quotas[task_id]
        if len(task_train) > q:
            keep = np.sort(self._rng.choice(len(task_train), q, replace=False))
            task_train = [task_train[i] for i in keep]
        self.stores[task_id] = task_train
        return self

    def sample_batch(self, batch_size: int) -> list[Sample]:
        """Task-uniform draws: pick a stored task, then a sample within it."""
        if batch_size == 0:
            return []
        nonempty = [t for t in self.task_ids if self.stores[t]]
        if not nonempty:
            raise EmptyBufferError("replay buffer is empty")
        tasks = self._rng.integers(len(nonempty), size=batch_size)
        out = []
        for k in tasks:
            store = self.stores[nonempty[k]]
            out.append(store[self._rng.integers(len(store))])
        return out

    def mixed_batch(self, current: Sequence[Sample]) -> list[Sample]:
        """``current`` plus an equal-sized replay batch, shuffled together."""
        current = list(current)
        if not current:
            raise ValueError("current batch is empty")
        mixed = current + (self.sample_batch(len(current)) if len(self) else [])
        order = self._rng.permutation(len(mixed))
        return [mixed[i] for i in order]

    def nbytes(self) -> int:
        return sum(s.image.nbytes for v in self.stores.values() for s in v)

    # -- checkpoint ---------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for t, store in self.stores.items():
            tdir = directory / f"task_{t:03d}"
            tdir.mkdir(exist_ok=True)
            for i, s in enumerate(store):
                Image.fromarray(s.image).save(tdir / f"{i:05d}.png")
        manifest = {
            "capacity": self.capacity,
            "seed": self.seed,
            "counts": {str(t): len(v) for t, v in self.stores.items()},
            "rng_state": self._rng.bit_generator.state,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "ReplayBuffer":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        buf = cls(manifest["capacity"], manifest["seed"])
        for t, n in manifest["counts"].items():
            t = int(t)
            tdir = directory / f"task_{t:03d}"
            buf.stores[t] = [
                Sample(np.asarray(Image.open(tdir / f"{i:05d}.png").convert("RGB")), None, NORMAL, t, TRAIN)
                for i in range(n)
            ]
        buf._rng.bit_generator.state = manifest["rng_state"]
        return buf

    def __repr__(self):
        return f"ReplayBuffer(capacity={self.capacity}, counts={self.counts()})"
