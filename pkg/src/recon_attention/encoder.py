"""Convolutional backbones that turn a 28x28 image into squashed feature capsules."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .routing import squash


def _check_images(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[1:] != (1, 28, 28):
        raise ValueError(f"expected images of shape (batch, 28, 28), got {tuple(x.shape)}")
    return x


def _to_capsules(maps: torch.Tensor, dim: int) -> torch.Tensor:
    # (B, types*dim, H, W) -> (B, types*H*W, dim); a capsule is one type at one position.
    b, c, h, w = maps.shape
    types = c // dim
    caps = maps.view(b, types, dim, h, w).permute(0, 1, 3, 4, 2)
    return caps.reshape(b, types * h * w, dim)


class Conv2Backbone(nn.Module):
    """Two 3x3 convolutions (32, 64 channels) with ReLU, then 2x2 max-pool.

    Output volume is 64 x 12 x 12 = 9216 values.
    """

    out_features = 9216

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3, 1)
        self.conv2 = nn.Conv2d(32, 64, 3, 1)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return F.max_pool2d(x, 2)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class ResNet18Backbone(nn.Module):
    """ResNet-18 residual stages adapted to 1x28x28 input.

    The stem is a 3x3 stride-1 convolution with no max-pool, so the first
    three stages run at 28, 14 and 7 pixels. The fourth stage is dropped and
    an adaptive average pool brings the 256-channel map to 3x3, giving
    256 * 9 = 2304 values (288 capsules of 8).
    """

    out_features = 2304

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self.layer1 = nn.Sequential(BasicBlock(64, 64), BasicBlock(64, 64))
        self.layer2 = nn.Sequential(BasicBlock(64, 128, 2), BasicBlock(128, 128))
        self.layer3 = nn.Sequential(BasicBlock(128, 256, 2), BasicBlock(256, 256))
        self.pool = nn.AdaptiveAvgPool2d((3, 3))

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.layer3(self.layer2(self.layer1(x)))
        return self.pool(x)


BACKBONES = {"conv2": Conv2Backbone, "resnet18": ResNet18Backbone}


class CapsuleEncoder(nn.Module):
    """Backbone followed by grouping into squashed ``dim``-vectors."""

    def __init__(self, kind: str = "conv2", dim: int = 8):
        super().__init__()
        if kind not in BACKBONES:
            raise ValueError(f"unknown encoder kind {kind!r}")
        self.kind = kind
        self.dim = dim
        self.backbone = BACKBONES[kind]()
        self.n_caps = self.backbone.out_features // dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        maps = self.backbone(_check_images(images))
        return squash(_to_capsules(maps, self.dim))


def encode(images: torch.Tensor, encoder: CapsuleEncoder) -> torch.Tensor:
    """Feature capsule poses, shape (batch, n_caps, 8)."""
    return encoder(images)
