"""Self-supervised objective: photometric SSIM+L1 with min-reprojection and auto-masking,
edge-aware smoothness, and optional velocity supervision on the pose translation."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .depthnet import invdepth_to_depth
from .geometry import pose_vec_to_transform, warp

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
# Stand-in loss for pixels a source cannot explain; above any reachable L_p value.
INVALID_LOSS = 1e3


@dataclass
class LossWeights:
    alpha: float = 0.85
    lambda1: float = 0.001
    lambda2: float = 0.05
    scale_decay: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.scale_decay <= 0:
            raise ValueError(f"scale_decay must be positive, got {self.scale_decay}")


@dataclass
class VelocityRecord:
    """Speed per sample [B] (m/s) and signed time offsets per source [B, S] (s)."""
    speed: torch.Tensor
    dt: torch.Tensor

    def __post_init__(self):
        if bool((self.speed < 0).any()):
            raise ValueError("speed must be non-negative")
        if bool((self.dt == 0).any()):
            raise ValueError("time offsets must be non-zero")


@dataclass
class PhotometricContext:
    """Target image [B, 3, H, W], source images and the camera matrix [B, 3, 3]."""
    target: torch.Tensor
    sources: list
    intrinsics: torch.Tensor


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2) -> torch.Tensor:
    """Per-pixel SSIM over 3x3 windows with reflection padding, same shape as the inputs."""
    _check_shapes(a, b)
    a = F.pad(a, (1, 1, 1, 1), mode="reflect")
    b = F.pad(b, (1, 1, 1, 1), mode="reflect")
    mu_a = F.avg_pool2d(a, 3, 1)
    mu_b = F.avg_pool2d(b, 3, 1)
    var_a = F.avg_pool2d(a * a, 3, 1) - mu_a ** 2
    var_b = F.avg_pool2d(b * b, 3, 1) - mu_b ** 2
    cov = F.avg_pool2d(a * b, 3, 1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def photometric_loss(target: torch.Tensor, synthesized: torch.Tensor, alpha: float = 0.85) -> torch.Tensor:
    """``alpha * (1 - SSIM) / 2 + (1 - alpha) * |target - synthesized|``, channel-averaged.

    Returns a [B, 1, H, W] map.
    """
    _check_shapes(target, synthesized)
    l1 = (target - synthesized).abs().mean(1, keepdim=True)
    if alpha == 0:
        return l1
    dssim = ((1 - ssim(target, synthesized)) / 2).mean(1, keepdim=True)
    return alpha * dssim + (1 - alpha) * l1


def min_reprojection(maps: list) -> torch.Tensor:
    """Element-wise minimum; on ties the lowest-index map wins (and gets the gradient)."""
    if not maps:
        raise ValueError("min_reprojection needs at least one map")
    out = maps[0]
    for m in maps[1:]:
        _check_shapes(out, m)
        out = torch.where(m < out, m, out)
    return out


def auto_mask(target, sources, synthesized, alpha: float = 0.85) -> torch.Tensor:
    """True where the best warped reconstruction beats the best unwarped source."""
    with torch.no_grad():
        unwarped = min_reprojection([photometric_loss(target, s, alpha) for s in sources])
        warped = min_reprojection([photometric_loss(target, s, alpha) for s in synthesized])
        return unwarped > warped


def _auto_mask_from_maps(unwarped_maps, warped_maps):
    with torch.no_grad():
        return min_reprojection(unwarped_maps) > min_reprojection(warped_maps)


def smoothness_loss(inv_depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness on mean-normalized inverse depth."""
    inv = inv_depth / (inv_depth.mean(dim=(2, 3), keepdim=True) + 1e-7)
    d_dx = (inv[..., :, :-1] - inv[..., :, 1:]).abs()
    d_dy = (inv[..., :-1, :] - inv[..., 1:, :]).abs()
    i_dx = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
    i_dy = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)
    return (d_dx * torch.exp(-i_dx)).mean() + (d_dy * torch.exp(-i_dy)).mean()


def velocity_loss(translations: torch.Tensor, vel: VelocityRecord) -> torch.Tensor:
    """``| ||t|| - |v| |dt| |`` summed over sources, averaged over the batch.

    ``translations`` is [B, S, 3].
    """
    norms = translations.norm(dim=-1)
    expected = vel.speed.abs().unsqueeze(-1) * vel.dt.abs()
    return (norms - expected).abs().sum(-1).mean()


def total_loss(ctx: PhotometricContext, inv_depths: list, poses: list, weights: LossWeights,
               velocity: VelocityRecord | None = None, depth_range=(0.1, 100.0),
               photo_masks: list | None = None):
    """Full objective over all scales.

    Parameters
    ----------
    ctx : PhotometricContext
    inv_depths : list of [B, 1, H/2^s, W/2^s] sigmoid outputs, index = scale
    poses : list of [B, 6] target->source pose vectors, one per source
    weights : LossWeights
    velocity : VelocityRecord, optional
    depth_range : (d_min, d_max) used to map inverse depth to metric depth
    photo_masks : optional per-source [B, 1, H, W] masks AND-ed with the warp validity

    Returns
    -------
    loss : torch.Tensor scalar
    diagnostics : dict of floats
    """
    target = ctx.target
    b, _, h, w = target.shape
    alpha = weights.alpha
    transforms = [pose_vec_to_transform(p) for p in poses]
    unwarped = [photometric_loss(target, s, alpha) for s in ctx.sources]

    photo_terms, smooth_terms, coverages = [], [], []
    empty_frames = 0
    image = target
    for s, inv in enumerate(inv_depths):
        if s > 0:
            image = F.interpolate(image, size=inv.shape[-2:], mode="area")
        smooth_terms.append(weights.scale_decay ** (-s) * smoothness_loss(inv, image))

        inv_full = inv if inv.shape[-2:] == (h, w) else F.interpolate(inv, size=(h, w), mode="nearest")
        depth = invdepth_to_depth(inv_full, *depth_range)
        warped_maps, valid_any = [], torch.zeros(b, 1, h, w, dtype=torch.bool, device=target.device)
        for j, (source, tf) in enumerate(zip(ctx.sources, transforms)):
            synth, valid = warp(source, depth, tf, ctx.intrinsics)
            if photo_masks is not None:
                valid = valid & photo_masks[j]
            lp = photometric_loss(target, synth, alpha)
            warped_maps.append(torch.where(valid, lp, torch.full_like(lp, INVALID_LOSS)))
            valid_any = valid_any | valid
        best = min_reprojection(warped_maps)
        mask = (valid_any & _auto_mask_from_maps(unwarped, warped_maps)).to(best.dtype)
        count = mask.sum(dim=(1, 2, 3))
        empty_frames += int((count == 0).sum())
        per_image = (best * mask).sum(dim=(1, 2, 3)) / count.clamp(min=1)
        photo_terms.append(per_image.mean())
        coverages.append(float(mask.mean()))

    photo = torch.stack(photo_terms).mean()
    smooth = torch.stack(smooth_terms).mean()
    loss = photo + weights.lambda1 * smooth
    vel_term = torch.zeros((), dtype=target.dtype, device=target.device)
    if velocity is not None:
        translations = torch.stack([p[:, 3:] for p in poses], dim=1)
        vel_term = velocity_loss(translations, velocity)
        loss = loss + weights.lambda2 * vel_term
    diagnostics = {
        "loss": float(loss.detach()),
        "photometric": float(photo.detach()),
        "smoothness": float(smooth.detach()),
        "velocity": float(vel_term.detach()),
        "mask_coverage": sum(coverages) / len(coverages),
        "empty_frames": empty_frames,
        "photometric_per_scale": [float(t.detach()) for t in photo_terms],
    }
    return loss, diagnostics
