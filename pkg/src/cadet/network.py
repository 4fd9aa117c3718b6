"""Desk-scale feature pyramid, shared per-pixel detection head and per-level discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .assignment import DEFAULT_STRIDES


@dataclass
class HeadOutputs:
    cls_logits: torch.Tensor  # (N, H, W, C)
    ctr_logits: torch.Tensor  # (N, H, W)
    reg_raw: torch.Tensor  # (N, H, W, 4), before the positivity transform
    reg: torch.Tensor  # (N, H, W, 4), ltrb distances in pixels


def _groups(channels: int, max_groups: int = 32) -> int:
    # at least two channels per group, so 1x1 maps at the coarsest levels still normalize
    return math.gcd(channels, max(1, min(max_groups, channels // 2)))


def _conv_gn_relu(cin: int, cout: int, stride: int = 1, norm: bool = True) -> list[nn.Module]:
    conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
    if not norm:
        nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
        nn.init.zeros_(conv.bias)
        return [conv, nn.ReLU(inplace=True)]
    return [conv, nn.GroupNorm(_groups(cout), cout), nn.ReLU(inplace=True)]


class Backbone(nn.Module):
    """Strided conv trunk (stem + 4 stages) with a top-down FPN producing five 256-style levels.

    Outputs have strides 8..128 and spatial size ``ceil(H / stride)``. With
    ``norm="none"`` the trunk is plain conv + ReLU, so per-image intensity
    statistics are not normalized away before the pyramid.
    """

    def __init__(self, channels: int = 256, widths: Sequence[int] = (32, 64, 128, 256), stem: int = 16,
                 norm: str = "group"):
        super().__init__()
        if norm not in ("group", "none"):
            raise ValueError(f"backbone norm must be 'group' or 'none', got {norm!r}")
        gn = norm == "group"
        self.channels = channels
        self.stem = nn.Sequential(*_conv_gn_relu(3, stem, stride=2, norm=gn))
        stages = []
        cin = stem
        for w in widths:
            stages.append(nn.Sequential(*_conv_gn_relu(cin, w, stride=2, norm=gn), *_conv_gn_relu(w, w, norm=gn)))
            cin = w
        self.stages = nn.ModuleList(stages)
        # C3..C5 are the outputs of the last three stages (strides 8, 16, 32).
        self.lateral = nn.ModuleList(nn.Conv2d(w, channels, 1) for w in widths[-3:])
        self.smooth = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))
        self.p6 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.p7 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        for m in [*self.lateral, *self.smooth, self.p6, self.p7]:
            nn.init.kaiming_uniform_(m.weight, a=1)
            nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if min(images.shape[-2:]) < DEFAULT_STRIDES[0]:
            raise ValueError(f"image {tuple(images.shape[-2:])} smaller than one stride-8 cell")
        x = self.stem(images)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        c3, c4, c5 = feats[-3:]
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        p3, p4, p5 = self.smooth[0](p3), self.smooth[1](p4), self.smooth[2](p5)
        p6 = self.p6(p5)
        p7 = self.p7(F.relu(p6))
        return [p3, p4, p5, p6, p7]


class DetectionHead(nn.Module):
    """Per-pixel classification / centerness / regression branches shared across levels.

    Two towers of ``num_convs`` 3x3 conv + GN + ReLU layers; classification
    and centerness read the first tower, regression the second. Each level has
    its own learnable scale inside ``exp(scale * raw) * stride``.
    """

    def __init__(self, channels: int = 256, num_classes: int = 3, num_convs: int = 4,
                 strides: Sequence[int] = DEFAULT_STRIDES, prior: float = 0.01):
        super().__init__()
        self.channels = channels
        self.strides = tuple(strides)
        cls_tower, box_tower = [], []
        for _ in range(num_convs):
            cls_tower += _conv_gn_relu(channels, channels)
            box_tower += _conv_gn_relu(channels, channels)
        self.cls_tower = nn.Sequential(*cls_tower)
        self.box_tower = nn.Sequential(*box_tower)
        self.cls_logits = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.centerness = nn.Conv2d(channels, 1, 3, padding=1)
        self.bbox_pred = nn.Conv2d(channels, 4, 3, padding=1)
        self.scales = nn.Parameter(torch.ones(len(self.strides)))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior) / prior))

    def forward(self, feature: torch.Tensor, level: int) -> HeadOutputs:
        """``level`` is the 0-based pyramid position (0 for F3)."""
        if feature.shape[1] != self.channels:
            raise ValueError(f"head expects {self.channels} channels, got {feature.shape[1]}")
        c = self.cls_tower(feature)
        b = self.box_tower(feature)
        cls = self.cls_logits(c).permute(0, 2, 3, 1)
        ctr = self.centerness(c)[:, 0]
        raw = self.bbox_pred(b).permute(0, 2, 3, 1)
        reg = torch.exp(self.scales[level] * raw) * self.strides[level]
        return HeadOutputs(cls, ctr, raw, reg)


class Discriminator(nn.Module):
    """Fully convolutional domain classifier: one logit per feature location. No normalization layers."""

    def __init__(self, channels: int = 256, num_convs: int = 4):
        super().__init__()
        self.channels = channels
        layers = []
        for _ in range(num_convs):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(channels, 1, 3, padding=1)
        nn.init.normal_(self.out.weight, std=0.01)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"discriminator expects {self.channels} channels, got {x.shape[1]}")
        return self.out(self.body(x))[:, 0]


class DomainAdaptiveDetector(nn.Module):
    """Backbone + FPN, one shared head, and a (global, center-aware) discriminator pair per level."""

    def __init__(self, num_classes: int = 3, channels: int = 256, widths: Sequence[int] = (32, 64, 128, 256),
                 stem: int = 16, head_convs: int = 4, disc_convs: int = 4,
                 strides: Sequence[int] = DEFAULT_STRIDES, prior: float = 0.01, backbone_norm: str = "group"):
        super().__init__()
        self.num_classes = num_classes
        self.strides = tuple(strides)
        self.backbone = Backbone(channels, widths, stem, backbone_norm)
        self.head = DetectionHead(channels, num_classes, head_convs, strides, prior)
        self.disc_ga = nn.ModuleList(Discriminator(channels, disc_convs) for _ in self.strides)
        self.disc_ca = nn.ModuleList(Discriminator(channels, disc_convs) for _ in self.strides)

    def forward(self, images: torch.Tensor) -> tuple[list[torch.Tensor], list[HeadOutputs]]:
        feats = self.backbone(images)
        outs = [self.head(f, i) for i, f in enumerate(feats)]
        return feats, outs

    def detector_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("disc_")]
