"""Depth network built from 3D packing / unpacking blocks.

The encoder-decoder follows the fifteen-row layout below (H, W divisible by 32)::

    row  layer                                          output
    01   Conv2d K5                                      c1 x H
    02   Conv2d K7 -> Packing                           c2 x H/2
    03   ResidualBlock x2 -> Packing                    c3 x H/4
    04   ResidualBlock x2 -> Packing                    c4 x H/8
    05   ResidualBlock x3 -> Packing                    c5 x H/16
    06   ResidualBlock x3 -> Packing                    c6 x H/32
    07   Unpacking(06) -> Conv2d(+05)                   d7 x H/16
    08   Unpacking(07) -> Conv2d(+04)                   d8 x H/8
    09   InvDepth(08)                                   1 x H/8
    10   Unpacking(08) -> Conv2d(+03, +up(09))          d10 x H/4
    11   InvDepth(10)                                   1 x H/4
    12   Unpacking(10) -> Conv2d(+02, +up(11))          d12 x H/2
    13   InvDepth(12)                                   1 x H/2
    14   Unpacking(12) -> Conv2d(+01, +up(13))          d14 x H
    15   InvDepth(14)                                   1 x H

Skip concatenation order is ``[unpacked, skip, upsampled inverse depth]``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

ENCODER_CHANNELS = (64, 64, 64, 128, 256, 512)
DECODER_CHANNELS = (512, 256, 128, 64, 64)
RESIDUAL_REPEATS = (2, 2, 3, 3)


@dataclass
class PackNetConfig:
    d_filters: int = 8
    base_kernel: int = 3
    use_pack_unpack: bool = True
    group_norm_groups: int = 16
    dropout_rate: float = 0.5
    encoder_channels: tuple = ENCODER_CHANNELS
    decoder_channels: tuple = DECODER_CHANNELS
    residual_repeats: tuple = RESIDUAL_REPEATS

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.residual_repeats = tuple(int(c) for c in self.residual_repeats)
        if self.d_filters < 0:
            raise ValueError(f"d_filters must be >= 0, got {self.d_filters}")
        if self.base_kernel % 2 != 1:
            raise ValueError(f"base_kernel must be odd, got {self.base_kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.encoder_channels) != 6 or len(self.decoder_channels) != 5:
            raise ValueError("expected 6 encoder and 5 decoder channel counts")
        if len(self.residual_repeats) != 4:
            raise ValueError("expected 4 residual repeat counts")
        if self.use_pack_unpack and self.d_filters:
            for c in self.decoder_channels:
                if (4 * c) % self.d_filters:
                    raise ValueError(
                        f"unpacking to {c} channels needs 4*{c} divisible by D={self.d_filters}")

    @classmethod
    def tiny(cls, divisor: int = 4, **kwargs) -> "PackNetConfig":
        """Same topology with every channel count divided by ``divisor``."""
        return cls(encoder_channels=tuple(c // divisor for c in ENCODER_CHANNELS),
                   decoder_channels=tuple(c // divisor for c in DECODER_CHANNELS), **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("encoder_channels", "decoder_channels", "residual_repeats"):
            d[key] = list(d[key])
        return d


def space_to_depth(x: torch.Tensor, r: int) -> torch.Tensor:
    """Fold r x r spatial blocks into channels.

    Output channel ``c * r**2 + i * r + j`` holds input channel ``c`` at block offset
    ``(i, j)`` (row-major within the block).
    """
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {r}")
    x = x.view(b, c, h // r, r, w // r, r)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(b, c * r * r, h // r, w // r)


def depth_to_space(x: torch.Tensor, r: int) -> torch.Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by {r}^2")
    x = x.view(b, c // (r * r), r, r, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, c // (r * r), h * r, w * r)


def _groups(groups: int, channels: int) -> int:
    return math.gcd(groups, channels) if groups else 0


class ConvBlock(nn.Module):
    """Conv2d -> GroupNorm -> ELU. ``groups=0`` drops the normalization."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, groups=16):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        g = _groups(groups, out_ch)
        self.norm = nn.GroupNorm(g, out_ch) if g else nn.Identity()
        self.activ = nn.ELU(inplace=True)

    def forward(self, x):
        return self.activ(self.norm(self.conv(x)))


class ResidualConv(nn.Module):
    """Three convolutions (K=3/3/1) with ELUs, GroupNorm and Dropout on the last one.

    The skip path is the identity, or a learned 1x1 projection when channels change.
    """

    def __init__(self, in_ch, out_ch, groups=16, dropout=0.5):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.conv3 = nn.Conv2d(out_ch, out_ch, 1)
        g = _groups(groups, out_ch)
        self.norm = nn.GroupNorm(g, out_ch) if g else nn.Identity()
        self.dropout = nn.Dropout2d(dropout) if dropout > 0 else nn.Identity()
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.activ = nn.ELU(inplace=False)

    def forward(self, x):
        y = self.activ(self.conv1(x))
        y = self.activ(self.conv2(y))
        y = self.dropout(self.norm(self.conv3(y)))
        return self.activ(y + self.skip(x))


class ResidualBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch, repeats, groups=16, dropout=0.5):
        layers = [ResidualConv(in_ch, out_ch, groups, dropout)]
        layers += [ResidualConv(out_ch, out_ch, groups, dropout) for _ in range(repeats - 1)]
        super().__init__(*layers)


class PackBlock(nn.Module):
    """Halve resolution: Space2Depth -> 3D conv expansion -> flatten -> 2D contraction.

    With ``d_filters=0`` the 3D stage and its reshapes are skipped; with
    ``use_pack_unpack=False`` the block is a plain stride-2 convolution.
    """

    def __init__(self, in_ch, out_ch, kernel=3, d_filters=8, use_pack_unpack=True, groups=16):
        super().__init__()
        self.mode = "pack" if use_pack_unpack else "stride"
        self.d_filters = d_filters
        if not use_pack_unpack:
            self.conv = ConvBlock(in_ch, out_ch, kernel, stride=2, groups=groups)
            return
        packed = in_ch * 4
        if d_filters:
            self.conv3d = nn.Conv3d(1, d_filters, kernel_size=3, padding=1)
            packed *= d_filters
        self.conv = ConvBlock(packed, out_ch, kernel, groups=groups)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"{self.__class__.__name__}: input {h}x{w} must have even dims")
        if self.mode == "stride":
            return self.conv(x)
        x = space_to_depth(x, 2)
        if self.d_filters:
            b, c, hh, ww = x.shape
            x = self.conv3d(x.unsqueeze(1)).reshape(b, c * self.d_filters, hh, ww)
        return self.conv(x)


class UnpackBlock(nn.Module):
    """Double resolution: 2D conv -> 3D conv expansion -> reshape -> Depth2Space.

    Fallbacks mirror :class:`PackBlock`: ``d_filters=0`` goes straight from the 2D conv to
    Depth2Space, ``use_pack_unpack=False`` is bilinear upsampling followed by a 2D conv.
    """

    def __init__(self, in_ch, out_ch, kernel=3, d_filters=8, use_pack_unpack=True, groups=16):
        super().__init__()
        self.mode = "unpack" if use_pack_unpack else "bilinear"
        self.d_filters = d_filters
        if not use_pack_unpack:
            self.conv = ConvBlock(in_ch, out_ch, kernel, groups=groups)
            return
        if d_filters:
            mid = out_ch * 4 // d_filters
            self.conv = ConvBlock(in_ch, mid, kernel, groups=groups)
            self.conv3d = nn.Conv3d(1, d_filters, kernel_size=3, padding=1)
        else:
            self.conv = ConvBlock(in_ch, out_ch * 4, kernel, groups=groups)

    def forward(self, x):
        if self.mode == "bilinear":
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            return self.conv(x)
        x = self.conv(x)
        if self.d_filters:
            b, c, h, w = x.shape
            x = self.conv3d(x.unsqueeze(1)).reshape(b, c * self.d_filters, h, w)
        return depth_to_space(x, 2)


class InvDepth(nn.Module):
    """3x3 conv to one channel followed by a sigmoid; values lie in (0, 1)."""

    def __init__(self, in_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_uniform_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class PackNet(nn.Module):
    """Encoder-decoder producing inverse depth at four scales.

    ``forward`` returns a list indexed by scale: entry ``s`` has resolution
    ``H / 2**s x W / 2**s``.
    """

    def __init__(self, cfg: PackNetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PackNetConfig()
        c1, c2, c3, c4, c5, c6 = cfg.encoder_channels
        d7, d8, d10, d12, d14 = cfg.decoder_channels
        r3, r4, r5, r6 = cfg.residual_repeats
        g, k, p = cfg.group_norm_groups, cfg.base_kernel, cfg.dropout_rate
        blk = dict(kernel=k, d_filters=cfg.d_filters, use_pack_unpack=cfg.use_pack_unpack, groups=g)

        self.l01_conv = ConvBlock(3, c1, 5, groups=g)
        self.l02_conv = ConvBlock(c1, c2, 7, groups=g)
        self.l02_pack = PackBlock(c2, c2, **blk)
        self.l03_res = ResidualBlock(c2, c3, r3, g, p)
        self.l03_pack = PackBlock(c3, c3, **blk)
        self.l04_res = ResidualBlock(c3, c4, r4, g, p)
        self.l04_pack = PackBlock(c4, c4, **blk)
        self.l05_res = ResidualBlock(c4, c5, r5, g, p)
        self.l05_pack = PackBlock(c5, c5, **blk)
        self.l06_res = ResidualBlock(c5, c6, r6, g, p)
        self.l06_pack = PackBlock(c6, c6, **blk)

        self.l07_unpack = UnpackBlock(c6, d7, **blk)
        self.l07_conv = ConvBlock(d7 + c5, d7, k, groups=g)
        self.l08_unpack = UnpackBlock(d7, d8, **blk)
        self.l08_conv = ConvBlock(d8 + c4, d8, k, groups=g)
        self.l09_invdepth = InvDepth(d8)
        self.l10_unpack = UnpackBlock(d8, d10, **blk)
        self.l10_conv = ConvBlock(d10 + c3 + 1, d10, k, groups=g)
        self.l11_invdepth = InvDepth(d10)
        self.l12_unpack = UnpackBlock(d10, d12, **blk)
        self.l12_conv = ConvBlock(d12 + c2 + 1, d12, k, groups=g)
        self.l13_invdepth = InvDepth(d12)
        self.l14_unpack = UnpackBlock(d12, d14, **blk)
        self.l14_conv = ConvBlock(d14 + c1 + 1, d14, k, groups=g)
        self.l15_invdepth = InvDepth(d14)
        _init_weights(self)

    def forward_rows(self, image: torch.Tensor) -> dict[int, torch.Tensor]:
        """Run the network and return the output of every row keyed by row number."""
        h, w = image.shape[-2:]
        if image.shape[-3] != 3:
            raise ValueError(f"expected 3-channel input, got {image.shape[-3]}")
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must have both dims divisible by 32")
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")  # noqa: E731
        rows = {0: image}
        rows[1] = x1 = self.l01_conv(image)
        rows[2] = x2 = self.l02_pack(self.l02_conv(x1))
        rows[3] = x3 = self.l03_pack(self.l03_res(x2))
        rows[4] = x4 = self.l04_pack(self.l04_res(x3))
        rows[5] = x5 = self.l05_pack(self.l05_res(x4))
        rows[6] = x6 = self.l06_pack(self.l06_res(x5))

        rows[7] = y7 = self.l07_conv(torch.cat([self.l07_unpack(x6), x5], 1))
        rows[8] = y8 = self.l08_conv(torch.cat([self.l08_unpack(y7), x4], 1))
        rows[9] = inv3 = self.l09_invdepth(y8)
        rows[10] = y10 = self.l10_conv(torch.cat([self.l10_unpack(y8), x3, up(inv3)], 1))
        rows[11] = inv2 = self.l11_invdepth(y10)
        rows[12] = y12 = self.l12_conv(torch.cat([self.l12_unpack(y10), x2, up(inv2)], 1))
        rows[13] = inv1 = self.l13_invdepth(y12)
        rows[14] = y14 = self.l14_conv(torch.cat([self.l14_unpack(y12), x1, up(inv1)], 1))
        rows[15] = self.l15_invdepth(y14)
        return rows

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        rows = self.forward_rows(image)
        return [rows[15], rows[13], rows[11], rows[9]]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def invdepth_to_depth(inv: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    """Map sigmoid output in (0, 1) to metric depth in [d_min, d_max]."""
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (inv * (hi - lo) + lo)


def depth_to_invdepth(depth: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return (1.0 / depth - lo) / (hi - lo)
