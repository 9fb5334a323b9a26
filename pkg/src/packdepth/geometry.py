"""Pinhole camera model, SE(3) algebra and differentiable view synthesis.

Conventions
-----------
* Pixel centers sit at integer coordinates, ``(0, 0)`` is the top-left pixel.
* Camera frame: x right, y down, z forward (metres).
* A :class:`RigidTransform` maps points expressed in one frame into another:
  ``p' = R @ p + t``. For view synthesis the pose handed to :func:`warp` is the
  target-to-source transform.

All tensor functions accept a leading batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch

# slack (pixels) so round-off at the raster border does not flip validity
BORDER_EPS = 1e-6
Z_MIN = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster")

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype, device=device)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    def flipped(self) -> "CameraIntrinsics":
        """Intrinsics of the horizontally mirrored image."""
        return replace(self, cx=self.width - 1 - self.cx)


@dataclass
class RigidTransform:
    """Batched SE(3) element.

    Parameters
    ----------
    rotation : torch.Tensor [..., 3, 3]
    translation : torch.Tensor [..., 3]
    """
    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch_shape=(), dtype=torch.float32, device=None) -> "RigidTransform":
        rot = torch.eye(3, dtype=dtype, device=device).expand(*batch_shape, 3, 3).clone()
        trans = torch.zeros(*batch_shape, 3, dtype=dtype, device=device)
        return cls(rot, trans)

    @classmethod
    def from_matrix(cls, mat) -> "RigidTransform":
        mat = torch.as_tensor(mat)
        return cls(mat[..., :3, :3], mat[..., :3, 3])

    def matrix(self) -> torch.Tensor:
        bottom = torch.zeros(*self.rotation.shape[:-2], 1, 4,
                             dtype=self.rotation.dtype, device=self.rotation.device)
        bottom[..., 0, 3] = 1.0
        top = torch.cat([self.rotation, self.translation.unsqueeze(-1)], dim=-1)
        return torch.cat([top, bottom], dim=-2)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform points of shape [B, ..., 3]."""
        b = self.rotation.shape[0] if self.rotation.dim() == 3 else None
        rot, trans = self.rotation, self.translation
        if b is not None:
            extra = points.dim() - 2
            rot = rot.view(b, *([1] * extra), 3, 3)
            trans = trans.view(b, *([1] * extra), 3)
        return (rot @ points.unsqueeze(-1)).squeeze(-1) + trans

    def is_valid(self, tol: float = 1e-6) -> bool:
        eye = torch.eye(3, dtype=self.rotation.dtype, device=self.rotation.device)
        ortho = (self.rotation.transpose(-1, -2) @ self.rotation - eye).abs().max()
        det = (torch.linalg.det(self.rotation) - 1).abs().max()
        return bool(ortho <= tol and det <= tol)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    rot = a.rotation @ b.rotation
    trans = (a.rotation @ b.translation.unsqueeze(-1)).squeeze(-1) + a.translation
    return RigidTransform(rot, trans)


def invert(t: RigidTransform) -> RigidTransform:
    rot_t = t.rotation.transpose(-1, -2)
    return RigidTransform(rot_t, -(rot_t @ t.translation.unsqueeze(-1)).squeeze(-1))


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, [..., 3] -> [..., 3, 3]; smooth through zero."""
    theta_sq = (axis_angle * axis_angle).sum(-1, keepdim=True)
    theta = torch.sqrt(theta_sq.clamp(min=1e-30))
    small = theta_sq < 1e-8
    # Taylor branches keep the map and its gradient finite near the identity.
    a = torch.where(small, 1 - theta_sq / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24, (1 - torch.cos(theta)) / theta_sq.clamp(min=1e-30))
    x, y, z = axis_angle.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1)
    skew = skew.view(*axis_angle.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + a.unsqueeze(-1) * skew + b.unsqueeze(-1) * (skew @ skew)


def matrix_to_axis_angle(rot: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`axis_angle_to_matrix` for rotation angles below pi."""
    cos = ((rot.diagonal(dim1=-2, dim2=-1).sum(-1) - 1) / 2).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    vec = torch.stack([rot[..., 2, 1] - rot[..., 1, 2],
                       rot[..., 0, 2] - rot[..., 2, 0],
                       rot[..., 1, 0] - rot[..., 0, 1]], dim=-1)
    sin = torch.sin(theta)
    scale = torch.where(sin.abs() < 1e-8, torch.full_like(theta, 0.5), theta / (2 * sin.clamp(min=1e-12)))
    return vec * scale.unsqueeze(-1)


def pose_vec_to_transform(vec: torch.Tensor) -> RigidTransform:
    """[..., 6] (axis-angle, translation) -> RigidTransform. Translation passes through."""
    return RigidTransform(axis_angle_to_matrix(vec[..., :3]), vec[..., 3:])


@dataclass
class PixelGrid:
    """Sub-pixel sampling coordinates ``coords`` [B, H, W, 2] (u, v) and ``valid`` [B, H, W]."""
    coords: torch.Tensor
    valid: torch.Tensor


def _k_matrix(k, dtype, device, batch: int) -> torch.Tensor:
    if isinstance(k, CameraIntrinsics):
        mat = k.matrix(dtype, device)
    else:
        mat = torch.as_tensor(k, dtype=dtype, device=device)
    if mat.dim() == 2:
        mat = mat.expand(batch, 3, 3)
    return mat


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Homogeneous pixel coordinates [H, W, 3] with (u, v, 1) at integer centers."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                          torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return torch.stack([u, v, torch.ones_like(u)], dim=-1)


def backproject(depth: torch.Tensor, k) -> torch.Tensor:
    """Lift a depth map [B, 1, H, W] (or [B, H, W]) to camera-frame points [B, H, W, 3]."""
    if depth.dim() == 4:
        depth = depth[:, 0]
    if bool((depth <= 0).any()):
        raise ValueError("backproject requires strictly positive depth")
    b, h, w = depth.shape
    kmat = _k_matrix(k, depth.dtype, depth.device, b)
    rays = pixel_grid(h, w, depth.dtype, depth.device)
    rays = torch.einsum("bij,hwj->bhwi", torch.linalg.inv(kmat), rays)
    return rays * depth.unsqueeze(-1)


def project(points: torch.Tensor, pose: RigidTransform | None, k,
            width: int | None = None, height: int | None = None) -> PixelGrid:
    """Transform points [B, H, W, 3] by ``pose`` and project them to pixels.

    Pixels whose transformed depth is at most ``Z_MIN`` or whose projection falls outside
    the raster are flagged invalid; coordinates stay finite everywhere.
    """
    b, h, w, _ = points.shape
    width = w if width is None else width
    height = h if height is None else height
    if pose is not None:
        points = pose.apply(points)
    kmat = _k_matrix(k, points.dtype, points.device, b)
    z = points[..., 2]
    front = z > Z_MIN
    z_safe = torch.where(front, z, torch.full_like(z, Z_MIN))
    fx = kmat[:, 0, 0].view(b, 1, 1)
    fy = kmat[:, 1, 1].view(b, 1, 1)
    cx = kmat[:, 0, 2].view(b, 1, 1)
    cy = kmat[:, 1, 2].view(b, 1, 1)
    u = fx * points[..., 0] / z_safe + cx
    v = fy * points[..., 1] / z_safe + cy
    eps = BORDER_EPS
    valid = front & (u >= -eps) & (u <= width - 1 + eps) & (v >= -eps) & (v <= height - 1 + eps)
    return PixelGrid(torch.stack([u, v], dim=-1), valid)


def bilinear_sample(image: torch.Tensor, grid: PixelGrid) -> torch.Tensor:
    """Bilinearly sample ``image`` [B, C, H, W] at ``grid``; invalid pixels read 0.

    Neighbours outside the raster contribute zero. Integer coordinates return the pixel
    value exactly, since the other three taps carry weight 0.
    """
    b, c, h, w = image.shape
    u, v = grid.coords.to(image.dtype).unbind(-1)
    u0, v0 = torch.floor(u), torch.floor(v)
    du, dv = u - u0, v - v0
    u0, v0 = u0.long(), v0.long()
    flat = image.reshape(b, c, h * w)
    out = 0
    for oy, wy in ((0, 1 - dv), (1, dv)):
        for ox, wx in ((0, 1 - du), (1, du)):
            x, y = u0 + ox, v0 + oy
            inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
            idx = (y.clamp(0, h - 1) * w + x.clamp(0, w - 1)).reshape(b, 1, -1).expand(b, c, -1)
            tap = torch.gather(flat, 2, idx).reshape(b, c, *u.shape[1:])
            out = out + tap * (wx * wy * inside.to(image.dtype)).unsqueeze(1)
    return out * grid.valid.unsqueeze(1).to(image.dtype)


def warp(source: torch.Tensor, target_depth: torch.Tensor, pose: RigidTransform, k):
    """Synthesize the target view from ``source`` using target depth and target->source pose.

    Returns
    -------
    synthesized : torch.Tensor [B, C, H, W]
    mask : torch.Tensor [B, 1, H, W] (bool)
    """
    points = backproject(target_depth, k)
    grid = project(points, pose, k, width=source.shape[-1], height=source.shape[-2])
    return bilinear_sample(source, grid), grid.valid.unsqueeze(1)


def scale_intrinsics(k: CameraIntrinsics, factor_x: float, factor_y: float) -> CameraIntrinsics:
    """Rescale intrinsics for an image resized by (``factor_x``, ``factor_y``).

    Scaling is linear, so pixel ``u`` of the original maps to ``u * factor_x``.
    """
    if factor_x <= 0 or factor_y <= 0:
        raise ValueError(f"scale factors must be positive, got ({factor_x}, {factor_y})")
    return CameraIntrinsics(fx=k.fx * factor_x, fy=k.fy * factor_y,
                            cx=k.cx * factor_x, cy=k.cy * factor_y,
                            width=int(round(k.width * factor_x)),
                            height=int(round(k.height * factor_y)))


def resize_intrinsics(k: CameraIntrinsics, width: int, height: int) -> CameraIntrinsics:
    """Intrinsics for the image resampled to ``width`` x ``height`` with area-preserving
    pixel footprints (PIL / OpenCV resize).

    With pixel centers on integers, old coordinate ``u`` lands at ``(u + 0.5) * s - 0.5``,
    so the principal point gets a half-pixel correction on top of :func:`scale_intrinsics`.
    """
    sx, sy = width / k.width, height / k.height
    k2 = scale_intrinsics(k, sx, sy)
    return replace(k2, cx=k2.cx + 0.5 * (sx - 1), cy=k2.cy + 0.5 * (sy - 1), width=width, height=height)
