"""Images to patch embeddings.

Every extractor maps a batch of ``uint8`` images (N, H, W, 3) to one
:class:`PatchEmbedding` per requested layer.  Two torch-free extractors
(average pooling and a seeded random projection) make the bank methods
testable without a network; :class:`RandomConvBackbone` is a small seeded CNN
used for desk-scale runs, and :class:`TorchvisionBackbone` wraps the usual
ImageNet ResNets.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class UnknownLayerError(KeyError):
    pass


@dataclass
class PatchEmbedding:
    """Patch features of a batch: ``grid`` has shape (N, Hf, Wf, d)."""

    grid: np.ndarray
    source_layers: list = field(default_factory=list)
    stride: int = 1

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float32)
        if grid.ndim == 3:
            grid = grid[None]
        if grid.ndim != 4 or min(grid.shape[1:]) < 1:
            raise ValueError(f"grid must be (N, Hf, Wf, d) with positive sizes, got {grid.shape}")
        self.grid = grid
        self.source_layers = list(self.source_layers)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def dim(self) -> int:
        return self.grid.shape[-1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.grid.shape[1], self.grid.shape[2]

    def patches(self) -> np.ndarray:
        """All patch vectors flattened to (N * Hf * Wf, d)."""
        return self.grid.reshape(-1, self.dim)

    def __len__(self):
        return self.grid.shape[0]


def _resize_nearest(grid: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    _, h, w, _ = grid.shape
    oh, ow = out_hw
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return grid[:, rows][:, :, cols]


def concat_multiscale(embeds: Sequence[PatchEmbedding]) -> PatchEmbedding:
    """Resize every grid to the largest one (nearest) and stack channels."""
    embeds = list(embeds)
    if not embeds:
        raise ValueError("concat_multiscale needs at least one embedding")
    if len(embeds) == 1:
        return embeds[0]
    n = {len(e) for e in embeds}
    if len(n) != 1:
        raise ValueError("embeddings must cover the same batch")
    target = max((e.spatial for e in embeds), key=lambda hw: hw[0] * hw[1])
    grids = [_resize_nearest(e.grid, target) for e in embeds]
    layers = [layer for e in embeds for layer in e.source_layers]
    stride = min(e.stride for e in embeds)
    return PatchEmbedding(np.concatenate(grids, axis=-1), layers, stride)


# -- flat binary format -----------------------------------------------------

_HEADER = struct.Struct("<III")


def embeddings_to_bytes(emb: PatchEmbedding) -> bytes:
    """Records of (Hf, Wf, d) uint32 header + little-endian float32 row-major grid."""
    _, h, w, d = emb.shape
    out = bytearray()
    for grid in emb.grid:
        out += _HEADER.pack(h, w, d)
        out += np.ascontiguousarray(grid, dtype="<f4").tobytes()
    return bytes(out)


def embeddings_from_bytes(buf: bytes, stride: int = 1) -> PatchEmbedding:
    grids = []
    offset = 0
    while offset < len(buf):
        h, w, d = _HEADER.unpack_from(buf, offset)
        offset += _HEADER.size
        n = h * w * d
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(h, w, d)
        offset += 4 * n
        grids.append(arr)
    if not grids:
        raise ValueError("no embedding records in buffer")
    return PatchEmbedding(np.stack(grids).astype(np.float32), [], stride)


def write_embeddings(path, emb: PatchEmbedding) -> Path:
    path = Path(path)
    path.write_bytes(embeddings_to_bytes(emb))
    return path


def read_embeddings(path, stride: int = 1) -> PatchEmbedding:
    return embeddings_from_bytes(Path(path).read_bytes(), stride)


# -- extractors -------------------------------------------------------------


def _as_batch(images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
    return images


class FeatureExtractor:
    """Common surface: ``extract``, ``out_channels``, ``strides``, ``n_parameters``."""

    layer_names: tuple = ()
    default_layers: tuple = ()

    def _check_layers(self, layers):
        layers = tuple(layers) if layers is not None else self.default_layers
        unknown = [l for l in layers if l not in self.layer_names]
        if unknown:
            raise UnknownLayerError(f"unknown layer(s) {unknown}; available: {list(self.layer_names)}")
        return layers

    def n_parameters(self) -> int:
        return 0

    def extract(self, images, layers=None) -> list[PatchEmbedding]:
        raise NotImplementedError


class IdentityExtractor(FeatureExtractor):
    """Average-pooled raw RGB over ``stride``x``stride`` cells."""

    layer_names = ("rgb",)
    default_layers = ("rgb",)

    def __init__(self, stride: int = 8):
        self.stride = stride

    def out_channels(self, layer="rgb") -> int:
        return 3

    def extract(self, images, layers=None):
        self._check_layers(layers)
        x = _as_batch(images).astype(np.float32)
        n, h, w, c = x.shape
        s = self.stride
        x = x[:, : h - h % s, : w - w % s]
        grid = x.reshape(n, h // s, s, w // s, s, c).mean(axis=(2, 4))
        return [PatchEmbedding(grid, ["rgb"], s)]


class RandomProjectionExtractor(FeatureExtractor):
    """Non-overlapping raw patches projected by a seeded Gaussian matrix."""

    layer_names = ("proj",)
    default_layers = ("proj",)

    def __init__(self, patch_size: int = 8, n_components: int = 16, seed: int = 0):
        self.patch_size = patch_size
        self.n_components = n_components
        self.seed = seed
        rng = np.random.default_rng(seed)
        k = patch_size * patch_size * 3
        self.matrix = (rng.standard_normal((k, n_components)) / np.sqrt(k)).astype(np.float32)

    def out_channels(self, layer="proj") -> int:
        return self.n_components

    def n_parameters(self) -> int:
        return self.matrix.size

    def extract(self, images, layers=None):
        self._check_layers(layers)
        x = _as_batch(images).astype(np.float32) / 255.0
        n, h, w, c = x.shape
        p = self.patch_size
        x = x[:, : h - h % p, : w - w % p]
        hp, wp = h // p, w // p
        patches = x.reshape(n, hp, p, wp, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hp, wp, -1)
        return [PatchEmbedding(patches @ self.matrix, ["proj"], p)]


def images_to_tensor(images, normalize: bool = True) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> float32 (N, 3, H, W), ImageNet-normalised."""
    if isinstance(images, torch.Tensor):
        x = images.float()
    else:
        x = torch.from_numpy(np.ascontiguousarray(_as_batch(images))).float()
    x = x.permute(0, 3, 1, 2) / 255.0
    if normalize:
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        x = (x - mean) / std
    return x


class TorchExtractor(FeatureExtractor):
    """Extractor backed by a frozen ``nn.Module`` exposing named stages."""

    net: nn.Module

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def forward_features(self, x: torch.Tensor, layers=None, net=None) -> dict:
        """Named stage outputs; ``net`` runs the same stages on another copy of the network."""
        raise NotImplementedError

    @torch.no_grad()
    def extract(self, images, layers=None, batch_size: int = 32):
        layers = self._check_layers(layers)
        images = _as_batch(images)
        chunks = {layer: [] for layer in layers}
        self.net.eval()
        for k in range(0, len(images), batch_size):
            feats = self.forward_features(images_to_tensor(images[k : k + batch_size]), layers)
            for layer in layers:
                chunks[layer].append(feats[layer].permute(0, 2, 3, 1).numpy())
        h = images.shape[1]
        out = []
        for layer in layers:
            grid = np.concatenate(chunks[layer])
            out.append(PatchEmbedding(grid, [layer], max(1, round(h / grid.shape[1]))))
        return out


def make_random_conv(channels=(32, 64, 128), seed: int = 0) -> nn.Sequential:
    """Three conv-relu-pool stages; each halves the resolution."""
    gen = torch.Generator().manual_seed(seed)
    stages = []
    c_in = 3
    for c_out in channels:
        conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        with torch.no_grad():
            conv.weight.copy_(
                torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / (c_in * 9))
            )
            conv.bias.zero_()
        stages.append(nn.Sequential(conv, nn.ReLU(), nn.AvgPool2d(2)))
        c_in = c_out
    return nn.Sequential(*stages)


class RandomConvBackbone(TorchExtractor):
    """Seeded random CNN with stages ``layer1``..``layer3`` (strides 2, 4, 8)."""

    layer_names = ("layer1", "layer2", "layer3")
    default_layers = ("layer1", "layer2")

    def __init__(self, channels=(32, 64, 128), seed: int = 0):
        self.channels = tuple(channels)
        self.seed = seed
        self.net = make_random_conv(self.channels, seed).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def out_channels(self, layer) -> int:
        return self.channels[self.layer_names.index(layer)]

    def forward_features(self, x, layers=None, net=None):
        layers = set(layers or self.layer_names)
        out = {}
        for name, stage in zip(self.layer_names, net if net is not None else self.net):
            x = stage(x)
            if name in layers:
                out[name] = x
        return out


class TorchvisionBackbone(TorchExtractor):
    """ResNet-family backbone from torchvision (``layer1``..``layer4``).

    ``weights`` is passed to the torchvision constructor; use ``None`` for
    random initialisation (shape checks) and ``"DEFAULT"`` for the ImageNet
    weights, which torchvision downloads or reads from its cache.
    """

    layer_names = ("layer1", "layer2", "layer3", "layer4")
    default_layers = ("layer2", "layer3")

    def __init__(self, arch: str = "wide_resnet50_2", weights="DEFAULT"):
        import torchvision

        self.arch = arch
        self.weights = weights
        self.net = getattr(torchvision.models, arch)(weights=weights).eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def out_channels(self, layer) -> int:
        block = getattr(self.net, layer)[-1]
        last_bn = [m for m in block.modules() if isinstance(m, nn.BatchNorm2d)][-1]
        return last_bn.num_features

    def forward_features(self, x, layers=None, net=None):
        layers = set(layers or self.layer_names)
        net = net if net is not None else self.net
        x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
        out = {}
        for name in self.layer_names:
            x = getattr(net, name)(x)
            if name in layers:
                out[name] = x
            if layers <= set(out):
                break
        return out


def make_extractor(backbone, seed: int = 0) -> FeatureExtractor:
    """Resolve an extractor instance or a short name."""
    if isinstance(backbone, FeatureExtractor):
        return backbone
    if backbone in (None, "random_conv"):
        return RandomConvBackbone(seed=seed)
    if backbone == "identity":
        return IdentityExtractor()
    if backbone == "random_projection":
        return RandomProjectionExtractor(seed=seed)
    if isinstance(backbone, str) and backbone.startswith(("resnet", "wide_resnet")):
        return TorchvisionBackbone(backbone)
    raise ValueError(f"unknown backbone {backbone!r}")


def local_average(grid: np.ndarray, size: int = 3) -> np.ndarray:
    """Neighbourhood average of a (N, Hf, Wf, d) grid with edge padding."""
    if size <= 1:
        return grid
    t = torch.from_numpy(np.ascontiguousarray(grid)).permute(0, 3, 1, 2)
    pad = size // 2
    t = F.avg_pool2d(F.pad(t, (pad, pad, pad, pad), mode="replicate"), size, stride=1)
    return t.permute(0, 2, 3, 1).numpy()
