"""FastFlow: 2-D normalizing flows over frozen backbone features."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..base import BaseAnomalyDetector, TorchTrainingMixin, param_count, postprocess, seed_everything
from ..features import images_to_tensor, make_extractor


class AffineCoupling2d(nn.Module):
    """Channel-split affine coupling with a convolutional subnet.

    A fixed channel permutation precedes the split.  The subnet's last
    convolution starts at zero, so every block starts with zero log-det.
    """

    def __init__(self, channels: int, kernel_size: int = 3, hidden_ratio: float = 1.0,
                 clamp: float = 2.0, perm_seed: int = 0):
        super().__init__()
        self.c1 = channels // 2
        self.c2 = channels - self.c1
        hidden = max(1, int(round(hidden_ratio * channels)))
        pad = kernel_size // 2
        self.subnet = nn.Sequential(
            nn.Conv2d(self.c1, hidden, kernel_size, padding=pad),
            nn.ReLU(),
            nn.Conv2d(hidden, 2 * self.c2, kernel_size, padding=pad),
        )
        nn.init.zeros_(self.subnet[-1].weight)
        nn.init.zeros_(self.subnet[-1].bias)
        self.clamp = clamp
        perm = torch.randperm(channels, generator=torch.Generator().manual_seed(perm_seed))
        self.register_buffer("perm", perm)
        self.register_buffer("inv_perm", torch.argsort(perm))

    def _scale_shift(self, x1):
        s, t = self.subnet(x1).chunk(2, dim=1)
        return self.clamp * torch.tanh(s / self.clamp), t

    def forward(self, x):
        x = x[:, self.perm]
        x1, x2 = x[:, : self.c1], x[:, self.c1 :]
        s, t = self._scale_shift(x1)
        y2 = x2 * torch.exp(s) + t
        return torch.cat([x1, y2], 1), s.sum(1)

    def inverse(self, y):
        y1, y2 = y[:, : self.c1], y[:, self.c1 :]
        s, t = self._scale_shift(y1)
        x2 = (y2 - t) * torch.exp(-s)
        return torch.cat([y1, x2], 1)[:, self.inv_perm]


class FlowStack(nn.Module):
    """Sequence of couplings alternating 3x3 and 1x1 subnet kernels."""

    def __init__(self, channels: int, n_steps: int = 8, hidden_ratio: float = 1.0,
                 clamp: float = 2.0, conv3x3_only: bool = False, seed: int = 0):
        super().__init__()
        self.blocks = nn.ModuleList(
            AffineCoupling2d(
                channels,
                3 if (conv3x3_only or i % 2 == 0) else 1,
                hidden_ratio,
                clamp,
                perm_seed=seed * 1000 + i,
            )
            for i in range(n_steps)
        )

    def forward(self, x):
        logdet = x.new_zeros(x.shape[0], x.shape[2], x.shape[3])
        for block in self.blocks:
            x, ld = block(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, z):
        for block in reversed(self.blocks):
            z = block.inverse(z)
        return z


def cell_nll(z: torch.Tensor, logdet: torch.Tensor) -> torch.Tensor:
    """Exact negative log-likelihood per grid cell under a standard normal base."""
    c = z.shape[1]
    return 0.5 * z.pow(2).sum(1) + 0.5 * c * math.log(2 * math.pi) - logdet


class FastFlow(TorchTrainingMixin, BaseAnomalyDetector):
    """One flow stack per backbone level, trained by maximum likelihood.

    The anomaly map is the per-cell NLL (divided by the channel count and
    averaged over levels) upsampled to the image.
    """

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer1", "layer2", "layer3"),
        flow_steps: int = 8,
        hidden_ratio: float = 1.0,
        clamp: float = 2.0,
        conv3x3_only: bool = False,
        epochs: int = 20,
        lr: float = 1e-3,
        weight_decay: float = 1e-5,
        batch_size: int = 8,
        smoothing_sigma: Optional[float] = 0.0,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.flow_steps = flow_steps
        self.hidden_ratio = hidden_ratio
        self.clamp = clamp
        self.conv3x3_only = conv3x3_only
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        seed_everything(self.random_state)
        self.extractor_ = make_extractor(self.backbone, self.random_state)
        self.norms_ = nn.ModuleList()
        self.flows_ = nn.ModuleList()
        for i, layer in enumerate(self.layers):
            c = self.extractor_.out_channels(layer)
            self.flows_.append(FlowStack(c, self.flow_steps, self.hidden_ratio, self.clamp,
                                         self.conv3x3_only, seed=self.random_state * 10 + i))
        self.optimizer_ = torch.optim.Adam(self.flows_.parameters(), lr=self.lr,
                                           weight_decay=self.weight_decay)
        self.loss_history_ = []

    def _features(self, images):
        with torch.no_grad():
            feats = self.extractor_.forward_features(images_to_tensor(images), self.layers)
            # affine-free layer norm over (C, H, W), as in the original method
            return [nn.functional.layer_norm(feats[l], feats[l].shape[1:]) for l in self.layers]

    def nll_maps(self, images):
        return [
            cell_nll(*flow(f)) / f.shape[1]
            for flow, f in zip(self.flows_, self._features(images))
        ]

    def _train_step(self, images, batch):
        self.flows_.train()
        return sum(m.mean() for m in self.nll_maps(images))

    def _learn_task(self, samples, replay, bank):
        seed = self.random_state + 1000 * getattr(self, "tasks_seen_", 0)
        self._run_epochs(samples, replay, self.epochs, self.optimizer_, seed)

    @torch.no_grad()
    def mean_nll(self, images) -> float:
        return float(sum(m.mean() for m in self.nll_maps(images)))

    @torch.no_grad()
    def _score_images(self, images):
        self.flows_.eval()
        h, w = images.shape[1:3]
        maps = np.mean([postprocess(m, (h, w), 0) for m in self.nll_maps(images)], axis=0)
        sigma = self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256
        maps = postprocess(maps, (h, w), sigma)
        return maps, maps.reshape(len(maps), -1).max(1)

    def n_parameters(self):
        return self.extractor_.n_parameters() + param_count(self.flows_)
