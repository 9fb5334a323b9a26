"""Single-image reconstruction: one packing + unpacking pair versus pooling + bilinear.

Both autoencoders share the 2D convolutions; only the down/up-sampling differs. Feature
maps carry ``channels`` at full resolution and ``4 * channels`` at half resolution, the
width at which Space2Depth loses nothing and max pooling still does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .depthnet import ConvBlock, PackBlock, UnpackBlock


class PackAutoencoder(nn.Module):
    def __init__(self, channels=4, kernel=3, d_filters=2):
        super().__init__()
        self.enc = ConvBlock(3, channels, kernel, groups=0)
        self.pack = PackBlock(channels, 4 * channels, kernel, d_filters=d_filters, groups=0)
        self.unpack = UnpackBlock(4 * channels, channels, kernel, d_filters=d_filters, groups=0)
        self.dec = nn.Conv2d(channels, 3, kernel, padding=kernel // 2)

    def forward(self, x):
        return self.dec(self.unpack(self.pack(self.enc(x))))


class PoolAutoencoder(nn.Module):
    def __init__(self, channels=4, kernel=3):
        super().__init__()
        self.enc = ConvBlock(3, channels, kernel, groups=0)
        self.down = ConvBlock(channels, 4 * channels, kernel, groups=0)
        self.up = ConvBlock(4 * channels, channels, kernel, groups=0)
        self.dec = nn.Conv2d(channels, 3, kernel, padding=kernel // 2)

    def forward(self, x):
        x = self.down(F.max_pool2d(self.enc(x), 2))
        x = F.interpolate(self.up(x), scale_factor=2, mode="bilinear", align_corners=False)
        return self.dec(x)


@dataclass
class ReconstructionResult:
    pack_loss: float
    pool_loss: float
    pack_curve: list
    pool_curve: list
    pack_output: torch.Tensor
    pool_output: torch.Tensor

    @property
    def ratio(self) -> float:
        return self.pool_loss / max(self.pack_loss, 1e-12)


def fit_autoencoder(model: nn.Module, image: torch.Tensor, steps: int, lr: float, log_every: int = 10):
    """Adam on the L1 reconstruction loss with a cosine-decayed learning rate."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    x = image.unsqueeze(0)
    curve = []
    for step in range(steps):
        loss = (model(x) - x).abs().mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if step % log_every == 0:
            curve.append(float(loss.detach()))
    with torch.no_grad():
        out = model(x)
        final = float((out - x).abs().mean())
    return final, curve, out[0].clamp(0, 1)


def reconstruct_demo(image: torch.Tensor, steps: int = 2000, lr: float = 5e-3, seed: int = 0,
                     channels: int = 4, kernel: int = 3, d_filters: int = 2) -> ReconstructionResult:
    """Train both autoencoders on ``image`` [3, H, W] with an L1 loss and report final losses."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {tuple(image.shape)}")
    if image.shape[1] % 2 or image.shape[2] % 2:
        raise ValueError("image dims must be even")
    torch.manual_seed(seed)
    pack = PackAutoencoder(channels, kernel, d_filters)
    torch.manual_seed(seed)
    pool = PoolAutoencoder(channels, kernel)
    pack_loss, pack_curve, pack_out = fit_autoencoder(pack, image, steps, lr)
    pool_loss, pool_curve, pool_out = fit_autoencoder(pool, image, steps, lr)
    return ReconstructionResult(pack_loss, pool_loss, pack_curve, pool_curve, pack_out, pool_out)


def textured_test_image(size: int = 128, seed: int = 0) -> torch.Tensor:
    """Deterministic RGB test pattern in [0, 1]: smooth color waves, flat patches with sharp
    edges, a fine checkerboard and pixel-scale luminance grain."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    for c in range(3):
        f = rng.uniform(2, 9, size=2)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * (f[0] * xx + rng.random())) * np.cos(
            2 * np.pi * (f[1] * yy + rng.random()))
    for _ in range(12):
        x0, y0 = rng.integers(0, size - 8, size=2)
        w, h = rng.integers(6, size // 3, size=2)
        img[:, y0:y0 + h, x0:x0 + w] = rng.random((3, 1, 1))
    checker = ((np.floor(xx * 32) + np.floor(yy * 32)) % 2)[None]
    img = np.where((xx > 0.7)[None] & (yy > 0.7)[None], 0.2 + 0.6 * checker, img)
    img = img + rng.uniform(-0.15, 0.15, size=(1, size, size))
    return torch.from_numpy(np.clip(img, 0, 1).astype(np.float32))
