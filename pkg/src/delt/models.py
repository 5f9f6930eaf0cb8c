"""Architecture registry for teachers and post-training students."""

from __future__ import annotations

import re
from typing import Callable

import torch.nn as nn
import torchvision.models as tvm

# Inputs at or below this side length get the low-resolution stem
# (3x3 stride-1 first conv, no max-pool), as is usual for CIFAR-style data.
LOW_RES_MAX = 64


class ConvNet(nn.Module):
    """Conv(3x3)-BN-ReLU-AvgPool blocks followed by a linear classifier."""

    def __init__(self, num_classes: int, depth: int = 4, width: int = 128, channels: int = 3,
                 resolution: int = 32, norm: bool = True):
        super().__init__()
        layers = []
        in_ch, res = channels, resolution
        for _ in range(depth):
            layers.append(nn.Conv2d(in_ch, width, 3, padding=1, bias=not norm))
            if norm:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.ReLU(inplace=True))
            if res >= 2:
                layers.append(nn.AvgPool2d(2))
                res //= 2
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(width, num_classes)

    def forward(self, x):
        x = self.pool(self.features(x)).flatten(1)
        return self.fc(x)


def _resnet(builder: Callable, num_classes: int, resolution: int, channels: int) -> nn.Module:
    model = builder(weights=None, num_classes=num_classes)
    if resolution <= LOW_RES_MAX:
        model.conv1 = nn.Conv2d(channels, 64, 3, 1, 1, bias=False)
        model.maxpool = nn.Identity()
    elif channels != 3:
        model.conv1 = nn.Conv2d(channels, 64, 7, 2, 3, bias=False)
    return model


def _mobilenet_v2_small(num_classes: int, resolution: int, channels: int) -> nn.Module:
    model = tvm.mobilenet_v2(weights=None, num_classes=num_classes)
    if resolution <= LOW_RES_MAX or channels != 3:
        stride = 1 if resolution <= LOW_RES_MAX else 2
        model.features[0][0] = nn.Conv2d(channels, 32, 3, stride, 1, bias=False)
    return model


_CONVNET_RE = re.compile(r"^convnet(\d+)(?:_w(\d+))?$")

ARCHITECTURES = ("resnet18", "resnet101", "convnet4", "convnet6", "mobilenet_v2_small")


def build_model(arch: str, num_classes: int, resolution: int, channels: int = 3) -> nn.Module:
    """Instantiate an untrained model.

    Besides the fixed ids in ``ARCHITECTURES``, ``convnet<depth>`` and
    ``convnet<depth>_w<width>`` select ConvNets of arbitrary depth/width.
    """
    if arch == "resnet18":
        return _resnet(tvm.resnet18, num_classes, resolution, channels)
    if arch == "resnet101":
        return _resnet(tvm.resnet101, num_classes, resolution, channels)
    if arch == "mobilenet_v2_small":
        return _mobilenet_v2_small(num_classes, resolution, channels)
    m = _CONVNET_RE.match(arch)
    if m:
        depth = int(m.group(1))
        width = int(m.group(2) or 128)
        return ConvNet(num_classes, depth=depth, width=width, channels=channels, resolution=resolution)
    raise ValueError(f"unknown architecture {arch!r}; known: {ARCHITECTURES} or convnet<d>[_w<width>]")


def load_pretrained_imagenet(arch: str) -> nn.Module:
    """Official torchvision ImageNet-1K weights (requires the weights to be downloadable or cached)."""
    if arch == "resnet18":
        return tvm.resnet18(weights=tvm.ResNet18_Weights.IMAGENET1K_V1)
    if arch == "resnet101":
        return tvm.resnet101(weights=tvm.ResNet101_Weights.IMAGENET1K_V1)
    if arch == "mobilenet_v2_small":
        return tvm.mobilenet_v2(weights=tvm.MobileNet_V2_Weights.IMAGENET1K_V1)
    raise ValueError(f"no published ImageNet checkpoint for {arch!r}")
