"""Convolutional feature extractors shared by the global and local branches.

Each backbone maps a (N, 3, 224, 224) batch in [0, 1] to
  * the final-stage feature map, (N, C, 7, 7) for a 224 input, and
  * a 128-d embedding: spatial average of that map through one linear layer.

Two architectures are available: torchvision's ResNet-50 (the feature map is
the output of ``layer4``, i.e. the last block of stage 5) and ``tiny``, a
four-stage residual net with the same /32 downsampling and ~60k parameters,
meant for CPU-scale experiments.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import EMBEDDING_DIM, Embedding, FeatureMap, ImageTensor

log = logging.getLogger(__name__)

INPUT_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "resnet50"
    embedding_dim: int = EMBEDDING_DIM
    pretrained: bool = True
    shared_local_weights: bool = False
    tiny_widths: Tuple[int, int, int, int] = (8, 16, 32, 64)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValueError(f"embedding_dim is fixed at {EMBEDDING_DIM}")


@dataclass(frozen=True)
class BackboneOutput:
    feature_map: FeatureMap
    embedding: Embedding


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class TinyResNet(nn.Module):
    """4x4 stride-4 stem followed by three stride-2 residual blocks (/32 overall)."""

    downsample = 32

    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64)):
        super().__init__()
        w0, w1, w2, w3 = widths
        self.stem = nn.Sequential(nn.Conv2d(3, w0, 4, 4, bias=False), nn.BatchNorm2d(w0), nn.ReLU(inplace=True))
        self.stages = nn.Sequential(BasicBlock(w0, w1, 2), BasicBlock(w1, w2, 2), BasicBlock(w2, w3, 2))
        self.out_channels = w3
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return self.stages(self.stem(x))


class ResNet50Trunk(nn.Module):
    downsample = 32

    def __init__(self, pretrained: bool):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50

        net = None
        if pretrained:
            try:
                net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
            except Exception as exc:  # offline, missing cache, ...
                log.warning("ImageNet weights unavailable (%s); using seeded random init", exc)
        if net is None:
            net = resnet50(weights=None)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.out_channels = 2048

    def forward(self, x):
        return self.body(x)


ARCHITECTURES = {"resnet50", "tiny"}


class Backbone(nn.Module):
    """Feature trunk + average pooling + linear projection to 128-d."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.architecture == "tiny":
            self.trunk = TinyResNet(cfg.tiny_widths)
        else:
            self.trunk = ResNet50Trunk(cfg.pretrained)
        self.proj = nn.Linear(self.trunk.out_channels, cfg.embedding_dim)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    @property
    def out_channels(self) -> int:
        return self.trunk.out_channels

    @property
    def downsample(self) -> int:
        return self.trunk.downsample

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        fmap = self.trunk((x - self.mean) / self.std)
        emb = self.proj(fmap.mean(dim=(2, 3)))
        return fmap, emb

    def _to_batch(self, imgs: Sequence[ImageTensor]) -> torch.Tensor:
        shapes = {img.data.shape for img in imgs}
        if len(shapes) > 1:
            raise ValueError(f"heterogeneous input shapes: {sorted(shapes)}")
        shape = shapes.pop()
        if shape != (3, INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"backbone input must be 3x{INPUT_SIZE}x{INPUT_SIZE}, got {shape}")
        return torch.from_numpy(np.stack([img.data for img in imgs]))

    @torch.no_grad()
    def extract_batch(self, imgs: Sequence[ImageTensor], kind: str = "global") -> List[BackboneOutput]:
        """Inference-mode extraction for already-resized images."""
        if not imgs:
            return []
        was_training = self.training
        self.eval()
        try:
            fmap, emb = self(self._to_batch(imgs).to(self.mean.device))
        finally:
            self.train(was_training)
        fmap = fmap.double().cpu().numpy()
        emb = emb.cpu().numpy()
        source = f"{self.cfg.architecture}:final"
        return [BackboneOutput(FeatureMap(f, source), Embedding(e, kind)) for f, e in zip(fmap, emb)]

    def extract(self, img: ImageTensor, kind: str = "global") -> BackboneOutput:
        return self.extract_batch([img], kind)[0]


def build_backbone(cfg: BackboneConfig, seed: Optional[int] = None) -> Backbone:
    """Construct a backbone; ``seed`` makes random initialization reproducible."""
    if seed is None:
        return Backbone(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(cfg)
