"""CFA: coupled-hypersphere feature adaptation with a running-average bank."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.cluster import KMeans
from torch import nn
from torch.nn import functional as F

from .base import (
    BaseAnomalyDetector,
    TorchTrainingMixin,
    param_count,
    postprocess,
    seed_everything,
)
from .features import images_to_tensor, make_extractor


@dataclass
class HypersphereBank:
    """``memory`` holds K target features of dimension d."""

    memory: np.ndarray
    radius: float = 1e-5
    nearest_k: int = 3
    hard_negative_j: int = 3
    batch_updates_seen: int = 0

    def __post_init__(self):
        self.memory = np.asarray(self.memory, dtype=np.float32)
        if self.memory.ndim != 2:
            raise ValueError("memory must be (K, d)")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def K(self) -> int:
        return self.memory.shape[0]

    @property
    def dim(self) -> int:
        return self.memory.shape[1]

    def n_floats(self) -> int:
        return self.memory.size

    def to_bytes(self) -> bytes:
        return self.memory.astype("<f4").tobytes()


def init_bank(patches, K: int, seed: int = 0, **bank_kwargs) -> HypersphereBank:
    """K-means centroids of (descriptor-transformed) training patches."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("patches must be (n, d)")
    if len(x) < K:
        raise ValueError(f"need at least K={K} patches, got {len(x)}")
    km = KMeans(n_clusters=K, n_init=1, random_state=seed).fit(x)
    return HypersphereBank(km.cluster_centers_, **bank_kwargs)


def incremental_bank_update(bank: HypersphereBank, batch_patches) -> HypersphereBank:
    """Move every matched entry toward the mean of its assigned batch patches.

    Entries are updated as ``c <- (b*c + mean) / (b + 1)`` with ``b`` the
    number of batches already absorbed in the current task.
    """
    x = np.asarray(batch_patches, dtype=np.float64)
    if x.size == 0:
        return bank
    if x.ndim != 2 or x.shape[1] != bank.dim:
        raise ValueError(f"batch patches must be (n, {bank.dim})")
    mem = bank.memory.astype(np.float64)
    d2 = (x**2).sum(1)[:, None] + (mem**2).sum(1)[None] - 2 * x @ mem.T
    assign = d2.argmin(1)
    counts = np.bincount(assign, minlength=bank.K)
    sums = np.zeros_like(mem)
    np.add.at(sums, assign, x)
    hit = counts > 0
    b = bank.batch_updates_seen
    mem[hit] = (b * mem[hit] + sums[hit] / counts[hit, None]) / (b + 1)
    bank.memory = mem.astype(np.float32)
    bank.batch_updates_seen = b + 1
    return bank


def _sq_distances(phi: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
    return (phi**2).sum(1, keepdim=True) + (memory**2).sum(1)[None] - 2 * phi @ memory.T


def cfa_loss(phi: torch.Tensor, memory: torch.Tensor, radius: float, nearest_k: int,
             hard_negative_j: int, alpha: float = 0.1, nu: float = 1e-3):
    """Soft-boundary attraction to the nearest entries plus hard-negative repulsion.

    ``phi`` is (n, d); returns ``(total, attraction, repulsion)``.
    """
    k, j = nearest_k, hard_negative_j
    n_nb = min(k + j, memory.shape[0])
    dist = _sq_distances(phi, memory).topk(n_nb, dim=1, largest=False).values
    r2 = radius**2
    att = torch.relu(dist[:, :k] - r2).mean() / nu
    if n_nb > k:
        rep = torch.relu(r2 - dist[:, k:n_nb] - alpha).mean() / nu
    else:
        rep = dist.new_zeros(())
    return att + rep, att, rep


def cfa_patch_scores(phi: torch.Tensor, memory: torch.Tensor, nearest_k: int) -> torch.Tensor:
    """Nearest squared distance weighted by its soft-min share among the k nearest."""
    k = min(nearest_k, memory.shape[0])
    dist = _sq_distances(phi, memory).clamp_min(0).topk(k, dim=1, largest=False).values
    return F.softmin(dist, dim=1)[:, 0] * dist[:, 0]


class PatchDescriptor(nn.Module):
    """Stack of 1x1 convolutions mapping backbone features to adapted features."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int] = ()):
        super().__init__()
        dims = [in_dim, *hidden, out_dim]
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Conv2d(a, b, 1), nn.LeakyReLU(0.1)]
        self.net = nn.Sequential(*layers[:-1])

    def forward(self, x):
        return self.net(x)


def _flatten(t: torch.Tensor) -> torch.Tensor:
    return t.permute(0, 2, 3, 1).reshape(-1, t.shape[1])


class CFA(TorchTrainingMixin, BaseAnomalyDetector):
    """CFA with a constant-size bank and replay-trained descriptor.

    On every new task the bank is first moved toward the task's features by a
    per-batch running average (using the descriptor as it was before the
    task), then the descriptor is trained on replay-mixed batches.

    Parameters
    ----------
    n_memory : int or None
        Bank size K; ``None`` uses the number of feature-grid positions.
    radius, alpha, nu :
        Hypersphere radius, repulsion margin and loss scale.
    nearest_k, hard_negative_j :
        Entries attracted to and repelled from, per patch.
    """

    memory_bank = True

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer2", "layer3"),
        n_memory: Optional[int] = None,
        descriptor_dim: Optional[int] = None,
        descriptor_hidden: Sequence[int] = (),
        radius: float = 1e-5,
        alpha: float = 0.1,
        nu: float = 1e-3,
        nearest_k: int = 3,
        hard_negative_j: int = 3,
        epochs: int = 10,
        lr: float = 1e-3,
        weight_decay: float = 5e-4,
        batch_size: int = 8,
        smoothing_sigma: Optional[float] = None,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.n_memory = n_memory
        self.descriptor_dim = descriptor_dim
        self.descriptor_hidden = descriptor_hidden
        self.radius = radius
        self.alpha = alpha
        self.nu = nu
        self.nearest_k = nearest_k
        self.hard_negative_j = hard_negative_j
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        seed_everything(self.random_state)
        self.extractor_ = make_extractor(self.backbone, self.random_state)
        d_in = sum(self.extractor_.out_channels(l) for l in self.layers)
        self.descriptor_ = PatchDescriptor(d_in, self.descriptor_dim or d_in, self.descriptor_hidden)
        self.optimizer_ = torch.optim.AdamW(
            self.descriptor_.parameters(), lr=self.lr, weight_decay=self.weight_decay, amsgrad=True
        )
        self.bank_ = None
        self.loss_history_ = []

    def _backbone(self, images) -> torch.Tensor:
        feats = self.extractor_.forward_features(images_to_tensor(images), self.layers)
        feats = [feats[l] for l in self.layers]
        size = max((f.shape[-2:] for f in feats), key=lambda s: s[0] * s[1])
        feats = [F.interpolate(f, size=size, mode="nearest") for f in feats]
        return torch.cat(feats, 1)

    @torch.no_grad()
    def transform_patches(self, images) -> np.ndarray:
        """Descriptor-transformed patch features, flattened to (n, d)."""
        self.descriptor_.eval()
        out = [_flatten(self.descriptor_(self._backbone(images[k : k + 16])))
               for k in range(0, len(images), 16)]
        return torch.cat(out).numpy()

    def _train_step(self, images, batch):
        self.descriptor_.train()
        with torch.no_grad():
            feats = self._backbone(images)
        phi = _flatten(self.descriptor_(feats))
        memory = torch.from_numpy(self.bank_.memory)
        loss, _, _ = cfa_loss(phi, memory, self.radius, self.nearest_k, self.hard_negative_j,
                              self.alpha, self.nu)
        return loss

    def _learn_task(self, samples, replay, bank):
        images = np.stack([s.image for s in samples])
        if self.bank_ is None or bank == "replace":
            bank_images = images
            if replay is not None and len(replay):
                bank_images = np.concatenate([images, np.stack([s.image for t in replay.task_ids
                                                                for s in replay.stores[t]])])
            patches = self.transform_patches(bank_images)
            grid = self._backbone(images[:1]).shape[-2:]
            k = self.n_memory or int(grid[0] * grid[1])
            self.bank_ = init_bank(patches, k, self.random_state, radius=self.radius,
                                   nearest_k=self.nearest_k, hard_negative_j=self.hard_negative_j)
        else:
            self.bank_.batch_updates_seen = 0
            for k in range(0, len(images), self.batch_size):
                incremental_bank_update(self.bank_, self.transform_patches(images[k : k + self.batch_size]))
        seed = self.random_state + 1000 * getattr(self, "tasks_seen_", 0)
        self._run_epochs(samples, replay, self.epochs, self.optimizer_, seed)

    @torch.no_grad()
    def _score_images(self, images):
        self.descriptor_.eval()
        phi = self.descriptor_(self._backbone(images))
        n, _, h, w = phi.shape
        s = cfa_patch_scores(_flatten(phi), torch.from_numpy(self.bank_.memory), self.nearest_k)
        maps = s.reshape(n, h, w).numpy()
        sigma = self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * images.shape[1] / 256
        maps = postprocess(maps, images.shape[1:3], sigma)
        return maps, maps.reshape(n, -1).max(1)

    def n_parameters(self):
        return self.extractor_.n_parameters() + param_count(self.descriptor_)

    def additional_floats(self):
        return self.bank_.n_floats() if self.bank_ is not None else 0

    def save_checkpoint(self, path):
        torch.save(
            {
                "descriptor": self.descriptor_.state_dict(),
                "memory": torch.from_numpy(self.bank_.memory),
                "batch_updates_seen": self.bank_.batch_updates_seen,
                "tasks_seen": self.tasks_seen_,
                "params": self.get_params(deep=False),
            },
            path,
        )
        return path

    def load_checkpoint(self, path):
        ckpt = torch.load(path, weights_only=False)
        self._reset()
        self.descriptor_.load_state_dict(ckpt["descriptor"])
        self.bank_ = HypersphereBank(ckpt["memory"].numpy(), self.radius, self.nearest_k,
                                     self.hard_negative_j, ckpt["batch_updates_seen"])
        self.tasks_seen_ = ckpt["tasks_seen"]
        self.consumed_ = []
        return self
