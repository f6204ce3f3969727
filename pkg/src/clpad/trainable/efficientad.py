"""EfficientAD: small patch-description networks plus an autoencoder."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..base import BaseAnomalyDetector, TorchTrainingMixin, param_count, postprocess, seed_everything
from ..features import images_to_tensor, make_extractor
from .draem import value_noise


def make_pdn(out_channels: int, width: int = 32) -> nn.Sequential:
    """Four-conv patch description network with output stride 4."""
    return nn.Sequential(
        nn.Conv2d(3, width, 4, padding=2), nn.ReLU(inplace=True),
        nn.AvgPool2d(2, 2),
        nn.Conv2d(width, 2 * width, 4, padding=2), nn.ReLU(inplace=True),
        nn.AvgPool2d(2, 2),
        nn.Conv2d(2 * width, 2 * width, 3, padding=0), nn.ReLU(inplace=True),
        nn.Conv2d(2 * width, out_channels, 1),
    )


class AutoEncoder(nn.Module):
    """Strided-conv encoder to a global code, interpolation decoder to the grid."""

    def __init__(self, out_channels: int, width: int = 32, latent: int = 64):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, 4, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, 4, 2, 1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(2 * width, latent, 1),
        )
        self.dec = nn.ModuleList([
            nn.Conv2d(latent, 2 * width, 3, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.Conv2d(2 * width, width, 3, padding=1),
        ])
        self.head = nn.Conv2d(width, out_channels, 3, padding=1)

    def forward(self, x, grid):
        y = self.enc(x)
        gh, gw = grid
        sizes = [(max(1, gh // 2**k), max(1, gw // 2**k)) for k in (3, 2, 1, 0)]
        for conv, size in zip(self.dec, sizes):
            y = F.relu(conv(F.interpolate(y, size=size, mode="bilinear", align_corners=False)))
        return self.head(y)


def hard_feature_loss(teacher: torch.Tensor, student: torch.Tensor, quantile: float = 0.999) -> torch.Tensor:
    """Mean squared difference over the elements at or above the given quantile."""
    d = (teacher - student) ** 2
    thr = torch.quantile(d.detach().flatten(), quantile)
    return d[d >= thr].mean()


def noise_images(n: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Colour value-noise images, a stand-in for a generic natural-image corpus."""
    h, w = shape
    out = np.empty((n, h, w, 3), dtype=np.uint8)
    for i in range(n):
        for c in range(3):
            out[i, ..., c] = np.rint(255 * value_noise((h, w), rng, octaves=5, base_cells=1))
    return out


def raw_maps(teacher, student, ae):
    """Student-teacher and autoencoder-student maps, each (N, h, w)."""
    c = teacher.shape[1]
    m_st = ((teacher - student[:, :c]) ** 2).mean(1)
    m_ae = ((ae - student[:, c:]) ** 2).mean(1)
    return m_st, m_ae


def fit_quantiles(maps, q_low: float = 0.9, q_high: float = 0.995) -> tuple[float, float]:
    flat = np.asarray(maps, dtype=np.float64).ravel()
    return float(np.quantile(flat, q_low)), float(np.quantile(flat, q_high))


def normalize_map(maps, quantiles) -> np.ndarray:
    """Affine map sending the low quantile to 0 and the high one to 0.1."""
    qa, qb = quantiles
    return 0.1 * (np.asarray(maps) - qa) / max(qb - qa, 1e-12)


class EfficientAD(TorchTrainingMixin, BaseAnomalyDetector):
    """Teacher PDN distilled once from a backbone; student PDN and autoencoder
    trained on every task.

    The student has twice the teacher's channels: the first half regresses the
    teacher (hard-feature loss), the second half the autoencoder.  Map
    normalisation quantiles are re-estimated on each task's training images.

    Parameters
    ----------
    backbone, layers :
        Distillation source; its concatenated channels set the teacher width
        unless ``out_channels`` is given.
    distill_epochs : int
        Teacher distillation epochs on the first task.
    hard_quantile : float
        Quantile of squared errors kept by the student's hard-feature loss.
    penalty_source : array (N, h, w, 3) or None
        Out-of-distribution images on which student outputs are pushed to
        zero; ``None`` draws seeded value-noise images.  ``penalty_weight=0``
        disables the term.
    """

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer1", "layer2"),
        out_channels: Optional[int] = None,
        width: int = 32,
        distill_epochs: int = 10,
        epochs: int = 20,
        lr: float = 1e-3,
        weight_decay: float = 1e-5,
        batch_size: int = 8,
        hard_quantile: float = 0.999,
        penalty_source=None,
        penalty_weight: float = 1.0,
        quantiles: Sequence[float] = (0.9, 0.995),
        smoothing_sigma: Optional[float] = None,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.out_channels = out_channels
        self.width = width
        self.distill_epochs = distill_epochs
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.hard_quantile = hard_quantile
        self.penalty_source = penalty_source
        self.penalty_weight = penalty_weight
        self.quantiles = quantiles
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        seed_everything(self.random_state)
        self.extractor_ = make_extractor(self.backbone, self.random_state)
        d = sum(self.extractor_.out_channels(l) for l in self.layers)
        c = self.out_channels or d
        self.proj_ = None if c == d else nn.Conv2d(d, c, 1).requires_grad_(False)
        self.teacher_ = make_pdn(c, self.width)
        self.student_ = make_pdn(2 * c, self.width)
        self.ae_ = AutoEncoder(c, self.width)
        self.teacher_mean_ = torch.zeros(1, c, 1, 1)
        self.teacher_std_ = torch.ones(1, c, 1, 1)
        params = list(self.student_.parameters()) + list(self.ae_.parameters())
        self.optimizer_ = torch.optim.Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        self.loss_history_ = []
        self.distill_history_ = []
        self.q_st_ = (0.0, 1.0)
        self.q_ae_ = (0.0, 1.0)
        self.penalty_rng_ = np.random.default_rng(self.random_state + 17)

    # -- teacher ------------------------------------------------------------

    @torch.no_grad()
    def _target(self, x, grid):
        feats = self.extractor_.forward_features(x, self.layers)
        t = torch.cat([F.adaptive_avg_pool2d(feats[l], grid) for l in self.layers], 1)
        return self.proj_(t) if self.proj_ is not None else t

    def _distill(self, images: np.ndarray):
        x = images_to_tensor(images)
        grid = self.teacher_(x[:1]).shape[-2:]
        target = torch.cat([self._target(x[k : k + 16], grid) for k in range(0, len(x), 16)])
        mean = target.mean((0, 2, 3), keepdim=True)
        std = target.std((0, 2, 3), keepdim=True) + 1e-6
        target = (target - mean) / std
        opt = torch.optim.Adam(self.teacher_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        gen = torch.Generator().manual_seed(self.random_state)
        for _ in range(self.distill_epochs):
            losses = []
            for idx in torch.randperm(len(x), generator=gen).split(self.batch_size):
                opt.zero_grad()
                loss = F.mse_loss(self.teacher_(x[idx]), target[idx])
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            self.distill_history_.append(float(np.mean(losses)))
        self.teacher_.requires_grad_(False).eval()
        with torch.no_grad():
            out = torch.cat([self.teacher_(x[k : k + 16]) for k in range(0, len(x), 16)])
        self.teacher_mean_ = out.mean((0, 2, 3), keepdim=True)
        self.teacher_std_ = out.std((0, 2, 3), keepdim=True) + 1e-6

    def _teacher(self, x):
        with torch.no_grad():
            return (self.teacher_(x) - self.teacher_mean_) / self.teacher_std_

    # -- student / autoencoder ------------------------------------------------

    def _outputs(self, x):
        t = self._teacher(x)
        s = self.student_(x)
        a = self.ae_(x, t.shape[-2:])
        return t, s, a

    def _train_step(self, images, batch):
        self.student_.train()
        self.ae_.train()
        t, s, a = self._outputs(images_to_tensor(images))
        c = t.shape[1]
        l_st = hard_feature_loss(t, s[:, :c], self.hard_quantile)
        l_ae = F.mse_loss(a, t)
        l_stae = F.mse_loss(s[:, c:], a.detach())
        loss = l_st + l_ae + l_stae
        if self.penalty_weight:
            p = images_to_tensor(self._penalty_batch(len(images), images.shape[1:3]))
            loss = loss + self.penalty_weight * self.student_(p)[:, :c].pow(2).mean()
        return loss

    def _penalty_batch(self, n, shape):
        rng = self.penalty_rng_
        if self.penalty_source is None:
            return noise_images(n, shape, rng)
        src = np.asarray(self.penalty_source)
        pick = src[rng.integers(len(src), size=n)]
        if pick.shape[1:3] != tuple(shape):
            t = torch.from_numpy(pick.astype(np.float32)).permute(0, 3, 1, 2)
            t = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
            pick = t.permute(0, 2, 3, 1).round().clamp(0, 255).numpy().astype(np.uint8)
        return pick

    @torch.no_grad()
    def _raw(self, images):
        self.student_.eval()
        self.ae_.eval()
        return raw_maps(*self._outputs(images_to_tensor(images)))

    def calibrate(self, images: np.ndarray):
        """Re-estimate the per-component normalisation quantiles on ``images``."""
        st, ae = zip(*(self._raw(images[k : k + 16]) for k in range(0, len(images), 16)))
        self.q_st_ = fit_quantiles(torch.cat(st).numpy(), *self.quantiles)
        self.q_ae_ = fit_quantiles(torch.cat(ae).numpy(), *self.quantiles)
        return self

    def _learn_task(self, samples, replay, bank):
        images = np.stack([s.image for s in samples])
        if getattr(self, "tasks_seen_", 0) == 0:
            self._distill(images)
        seed = self.random_state + 1000 * getattr(self, "tasks_seen_", 0)
        self._run_epochs(samples, replay, self.epochs, self.optimizer_, seed)
        self.calibrate(images)

    def combined_maps(self, images) -> np.ndarray:
        """Normalised 0.5 * (student-teacher + autoencoder-student) at grid resolution."""
        m_st, m_ae = self._raw(images)
        return 0.5 * (normalize_map(m_st.numpy(), self.q_st_) + normalize_map(m_ae.numpy(), self.q_ae_))

    def _score_images(self, images):
        maps = self.combined_maps(images).astype(np.float32)
        h = images.shape[1]
        sigma = self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256
        maps = postprocess(maps, images.shape[1:3], sigma)
        return maps, maps.reshape(len(maps), -1).max(1)

    def n_parameters(self):
        return self.extractor_.n_parameters() + param_count(self.proj_, self.teacher_, self.student_, self.ae_)

    def save_checkpoint(self, path):
        torch.save(
            {
                "teacher": self.teacher_.state_dict(),
                "student": self.student_.state_dict(),
                "ae": self.ae_.state_dict(),
                "teacher_mean": self.teacher_mean_,
                "teacher_std": self.teacher_std_,
                "q_st": self.q_st_,
                "q_ae": self.q_ae_,
                "tasks_seen": self.tasks_seen_,
            },
            path,
        )
        return path

    def load_checkpoint(self, path):
        ckpt = torch.load(path, weights_only=False)
        self._reset()
        self.teacher_.load_state_dict(ckpt["teacher"])
        self.teacher_.requires_grad_(False).eval()
        self.student_.load_state_dict(ckpt["student"])
        self.ae_.load_state_dict(ckpt["ae"])
        self.teacher_mean_, self.teacher_std_ = ckpt["teacher_mean"], ckpt["teacher_std"]
        self.q_st_, self.q_ae_ = tuple(ckpt["q_st"]), tuple(ckpt["q_ae"])
        self.tasks_seen_ = ckpt["tasks_seen"]
        self.consumed_ = []
        return self
