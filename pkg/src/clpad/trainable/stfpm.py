"""STFPM: student-teacher feature pyramid matching."""
from __future__ import annotations

import copy
from typing import Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from ..base import BaseAnomalyDetector, TorchTrainingMixin, param_count, postprocess, seed_everything
from ..features import images_to_tensor, make_extractor


def _reinit(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif hasattr(m, "reset_parameters") and not isinstance(m, (nn.Conv2d, nn.Linear)):
            m.reset_parameters()


def pyramid_distances(teacher_feats: Sequence[torch.Tensor], student_feats: Sequence[torch.Tensor]):
    """Per-level maps of 0.5 * ||t/|t| - s/|s|||^2, each (N, h, w)."""
    return [
        0.5 * (F.normalize(t, dim=1) - F.normalize(s, dim=1)).pow(2).sum(1)
        for t, s in zip(teacher_feats, student_feats)
    ]


class STFPM(TorchTrainingMixin, BaseAnomalyDetector):
    """Student network regressing a frozen teacher's normalised feature pyramid.

    The student shares the teacher's architecture and starts from a random
    initialisation (``student_init="teacher"`` copies the teacher instead).
    Student weights and optimizer state persist across tasks.
    """

    def __init__(
        self,
        backbone="random_conv",
        layers: Sequence[str] = ("layer1", "layer2", "layer3"),
        student_init: str = "random",
        epochs: int = 20,
        lr: float = 0.4,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        optimizer: str = "sgd",
        batch_size: int = 8,
        smoothing_sigma: Optional[float] = 0.0,
        random_state: int = 0,
    ):
        self.backbone = backbone
        self.layers = layers
        self.student_init = student_init
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        seed_everything(self.random_state)
        self.teacher_ = make_extractor(self.backbone, self.random_state)
        self.student_ = copy.deepcopy(self.teacher_.net)
        if self.student_init == "random":
            torch.manual_seed(self.random_state + 1)
            _reinit(self.student_)
        elif self.student_init != "teacher":
            raise ValueError(f"student_init must be 'random' or 'teacher', got {self.student_init!r}")
        for p in self.student_.parameters():
            p.requires_grad_(True)
        params = self.student_.parameters()
        if self.optimizer == "sgd":
            self.optimizer_ = torch.optim.SGD(params, lr=self.lr, momentum=self.momentum,
                                              weight_decay=self.weight_decay)
        else:
            self.optimizer_ = torch.optim.Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        self.loss_history_ = []

    def _pyramids(self, x):
        with torch.no_grad():
            t = self.teacher_.forward_features(x, self.layers)
        s = self.teacher_.forward_features(x, self.layers, net=self.student_)
        return [t[l] for l in self.layers], [s[l] for l in self.layers]

    def loss(self, images) -> torch.Tensor:
        t, s = self._pyramids(images_to_tensor(images))
        return sum(d.mean() for d in pyramid_distances(t, s))

    def _train_step(self, images, batch):
        self.student_.train()
        return self.loss(images)

    def _learn_task(self, samples, replay, bank):
        seed = self.random_state + 1000 * getattr(self, "tasks_seen_", 0)
        self._run_epochs(samples, replay, self.epochs, self.optimizer_, seed)

    @torch.no_grad()
    def _score_images(self, images):
        self.student_.eval()
        t, s = self._pyramids(images_to_tensor(images))
        h, w = images.shape[1:3]
        maps = sum(postprocess(d, (h, w), 0) for d in pyramid_distances(t, s))
        sigma = self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256
        maps = postprocess(maps, (h, w), sigma)
        return maps, maps.reshape(len(maps), -1).max(1)

    def n_parameters(self):
        return param_count(self.teacher_.net, self.student_)
