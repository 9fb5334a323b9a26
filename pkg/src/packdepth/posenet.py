"""Ego-motion network: one 6-DoF transform per (target, source) image pair."""
from __future__ import annotations

import torch
import torch.nn as nn

from .geometry import RigidTransform, pose_vec_to_transform

POSE_CHANNELS = (16, 32, 64, 128, 256, 256, 256)
POSE_KERNELS = (7, 5, 3, 3, 3, 3, 3)


class PoseNet(nn.Module):
    """Seven stride-2 convolutions with ReLU, a 1x1 conv to 6 channels, spatial mean.

    Output layout is ``[axis_angle (rad, 3), translation (m, 3)]`` scaled by
    ``output_scale`` so a fresh network predicts poses close to the identity.
    """

    def __init__(self, channels=POSE_CHANNELS, kernels=POSE_KERNELS, output_scale=0.01,
                 zero_init_last=False):
        super().__init__()
        layers, in_ch = [], 6
        for ch, k in zip(channels, kernels):
            layers += [nn.Conv2d(in_ch, ch, k, stride=2, padding=k // 2), nn.ReLU(inplace=True)]
            in_ch = ch
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_ch, 6, 1)
        self.output_scale = output_scale
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        if zero_init_last:
            nn.init.zeros_(self.head.weight)

    def forward(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        if target.shape != source.shape:
            raise ValueError(f"frame shapes differ: {tuple(target.shape)} vs {tuple(source.shape)}")
        x = torch.cat([target, source], dim=1) - 0.5
        out = self.head(self.encoder(x)).mean(dim=(2, 3))
        return self.output_scale * out


def pose_to_transform(pose: torch.Tensor) -> RigidTransform:
    return pose_vec_to_transform(pose)
