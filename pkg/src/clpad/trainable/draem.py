"""DRAEM: reconstruction plus discriminative segmentation on synthetic anomalies."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..base import BaseAnomalyDetector, TorchTrainingMixin, param_count, postprocess, seed_everything


def value_noise(shape, rng: np.random.Generator, octaves: int = 4, base_cells: int = 2) -> np.ndarray:
    """Multi-octave value noise in [0, 1] of the given (H, W) shape.

    Octave ``o`` places random values on a lattice of ``base_cells * 2**o``
    cells and bilinearly interpolates them; amplitudes halve per octave.
    """
    h, w = shape
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2**o
        lattice = torch.from_numpy(rng.random((1, 1, cells + 1, cells + 1)))
        up = F.interpolate(lattice, size=(h, w), mode="bilinear", align_corners=True)[0, 0].numpy()
        out += amp * up
        total += amp
        amp *= 0.5
    return out / total


def shuffled_texture(image: np.ndarray, rng: np.random.Generator, grid: int = 4) -> np.ndarray:
    """Texture made by permuting the image's ``grid x grid`` cells."""
    h, w = image.shape[:2]
    ch, cw = h // grid, w // grid
    cells = [image[i * ch : (i + 1) * ch, j * cw : (j + 1) * cw] for i in range(grid) for j in range(grid)]
    order = rng.permutation(len(cells))
    rows = [np.concatenate([cells[order[i * grid + j]] for j in range(grid)], 1) for i in range(grid)]
    tex = np.concatenate(rows, 0)
    out = image.copy()
    out[: tex.shape[0], : tex.shape[1]] = tex
    return out


def _pick_texture(image, texture_source, rng):
    if texture_source is None or len(texture_source) == 0:
        tex = shuffled_texture(image, rng).astype(np.float64)
    else:
        src = np.asarray(texture_source[int(rng.integers(len(texture_source)))])
        t = torch.from_numpy(src.astype(np.float32)).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=image.shape[:2], mode="bilinear", align_corners=False)
        tex = t[0].permute(1, 2, 0).numpy().astype(np.float64)
    if rng.random() < 0.5:
        tex = 255.0 - tex
    tex = tex * rng.uniform(0.6, 1.4) + rng.uniform(-40, 40)
    return np.clip(tex, 0, 255)


def draem_synthesize(image, texture_source=None, seed: int = 0, opacity: Optional[float] = None,
                     area_range: Sequence[float] = (0.05, 0.30), opacity_range: Sequence[float] = (0.2, 1.0)):
    """Paste a noise-shaped region of foreign texture into ``image``.

    The region is value noise thresholded so that its area fraction is drawn
    uniformly from ``area_range``.  Inside it the result is
    ``image + opacity * (texture - image)``.  Returns ``(augmented uint8
    image, uint8 mask)``; with ``opacity == 0`` the image is returned
    unchanged with an empty mask.
    """
    image = np.asarray(image)
    rng = np.random.default_rng(seed)
    h, w = image.shape[:2]
    if opacity is None:
        opacity = rng.uniform(*opacity_range)
    if opacity <= 0:
        return image.copy(), np.zeros((h, w), dtype=np.uint8)
    noise = value_noise((h, w), rng)
    area = rng.uniform(*area_range)
    k = max(1, int(round(area * h * w)))
    # rank-threshold: exactly k pixels (ties broken by flat order)
    order = np.argsort(-noise, axis=None, kind="stable")
    mask = np.zeros(h * w, dtype=np.uint8)
    mask[order[:k]] = 1
    mask = mask.reshape(h, w)
    tex = _pick_texture(image, texture_source, rng)
    img = image.astype(np.float64)
    out = img + opacity * mask[..., None] * (tex - img)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8), mask


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Small encoder-decoder with optional skip connections."""

    def __init__(self, cin: int, cout: int, width: int = 16, depth: int = 3, skips: bool = True):
        super().__init__()
        self.skips = skips
        chans = [width * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList([_block(cin, chans[0])] + [_block(chans[i], chans[i + 1]) for i in range(depth)])
        self.up = nn.ModuleList(
            [_block(chans[i + 1] + (chans[i] if skips else 0), chans[i]) for i in reversed(range(depth))]
        )
        self.head = nn.Conv2d(chans[0], cout, 1)

    def forward(self, x):
        feats = [self.down[0](x)]
        for blk in self.down[1:]:
            feats.append(blk(F.max_pool2d(feats[-1], 2)))
        y = feats.pop()
        for blk in self.up:
            skip = feats.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = blk(torch.cat([y, skip], 1) if self.skips else y)
        return self.head(y)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean structural similarity of two (N, C, H, W) tensors in [0, 1]."""
    c = a.shape[1]
    x = torch.arange(window, dtype=a.dtype) - window // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    kernel = (g[:, None] * g[None]).expand(c, 1, window, window).contiguous()

    def blur(t):
        return F.conv2d(t, kernel, padding=window // 2, groups=c)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return s.mean()


def focal_loss(logits: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Two-class focal loss; ``target`` is a (N, H, W) {0,1} tensor."""
    logp = F.log_softmax(logits, 1).gather(1, target[:, None].long())[:, 0]
    return (-(1 - logp.exp()) ** gamma * logp).mean()


class DRAEM(TorchTrainingMixin, BaseAnomalyDetector):
    """Reconstructive and discriminative subnetworks trained on synthetic defects.

    Every training image (current or replayed) is replaced with probability
    ``anomaly_prob`` by a :func:`draem_synthesize` augmentation.  The
    reconstruction net learns to restore the clean image; the segmentation
    net sees the augmented image stacked with its reconstruction and
    predicts the synthesis mask.

    Parameters
    ----------
    texture_source : array (N, h, w, 3) or None
        Optional texture corpus; ``None`` uses self-shuffled cells.
    anomaly_prob : float
        Probability of synthesising an anomaly per training image.
    width : int
        Base channel width of both subnetworks.
    """

    def __init__(
        self,
        texture_source=None,
        anomaly_prob: float = 0.5,
        area_range: Sequence[float] = (0.05, 0.30),
        width: int = 16,
        depth: int = 3,
        epochs: int = 20,
        lr: float = 1e-3,
        batch_size: int = 8,
        focal_gamma: float = 2.0,
        smoothing_sigma: Optional[float] = None,
        random_state: int = 0,
    ):
        self.texture_source = texture_source
        self.anomaly_prob = anomaly_prob
        self.area_range = area_range
        self.width = width
        self.depth = depth
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.focal_gamma = focal_gamma
        self.smoothing_sigma = smoothing_sigma
        self.random_state = random_state

    def _reset(self):
        seed_everything(self.random_state)
        self.recon_ = UNet(3, 3, self.width, self.depth, skips=False)
        self.seg_ = UNet(6, 2, self.width, self.depth, skips=True)
        params = list(self.recon_.parameters()) + list(self.seg_.parameters())
        self.optimizer_ = torch.optim.Adam(params, lr=self.lr)
        self.loss_history_ = []
        self.steps_ = 0

    def augment(self, images: np.ndarray, seed: int):
        """Synthesise anomalies on a batch; returns (augmented, masks)."""
        rng = np.random.default_rng(seed)
        out, masks = images.copy(), np.zeros(images.shape[:3], dtype=np.uint8)
        for i, img in enumerate(images):
            if rng.random() < self.anomaly_prob:
                out[i], masks[i] = draem_synthesize(img, self.texture_source, int(rng.integers(2**31)),
                                                    area_range=self.area_range)
        return out, masks

    @staticmethod
    def _to_tensor(images):
        return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float() / 255.0

    def _forward(self, x):
        recon = torch.sigmoid(self.recon_(x))
        logits = self.seg_(torch.cat([x, recon], 1))
        return recon, logits

    def _train_step(self, images, batch):
        self.recon_.train()
        self.seg_.train()
        aug, masks = self.augment(images, self.random_state * 7_919 + self.steps_)
        self.steps_ += 1
        clean = self._to_tensor(images)
        recon, logits = self._forward(self._to_tensor(aug))
        l_rec = F.mse_loss(recon, clean) + (1 - ssim(recon, clean))
        l_seg = focal_loss(logits, torch.from_numpy(masks), self.focal_gamma)
        return l_rec + l_seg

    def _learn_task(self, samples, replay, bank):
        seed = self.random_state + 1000 * getattr(self, "tasks_seen_", 0)
        self._run_epochs(samples, replay, self.epochs, self.optimizer_, seed)

    @torch.no_grad()
    def reconstruct(self, images) -> np.ndarray:
        self.recon_.eval()
        return torch.sigmoid(self.recon_(self._to_tensor(images))).permute(0, 2, 3, 1).numpy()

    @torch.no_grad()
    def _score_images(self, images):
        self.recon_.eval()
        self.seg_.eval()
        _, logits = self._forward(self._to_tensor(images))
        maps = F.softmax(logits, 1)[:, 1]
        h = images.shape[1]
        sigma = self.smoothing_sigma if self.smoothing_sigma is not None else 4.0 * h / 256
        maps = postprocess(maps, images.shape[1:3], sigma)
        return maps, maps.reshape(len(maps), -1).max(1)

    def n_parameters(self):
        return param_count(self.recon_, self.seg_)
