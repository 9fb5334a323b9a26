"""Analytic synthetic scenes: a ray-cast textured world with exact depth and camera poses.

The world is a textured ground plane, a textured back wall leaning away from the camera
and a set of textured boxes standing on the ground. The camera travels sideways (world +x) at a time-varying speed
while looking down +z, so every pixel carries parallax and has closed-form depth.
Textures are smooth procedural functions of world coordinates, which makes the
brightness-constancy assumption of view synthesis hold exactly up to sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import CameraIntrinsics, RigidTransform


@dataclass
class Box:
    lo: np.ndarray  # (3,) min corner, world frame
    hi: np.ndarray  # (3,) max corner
    texture_offset: np.ndarray  # (2,)


@dataclass
class SyntheticScene:
    """Scene geometry, camera path and intrinsics.

    World frame matches the camera convention (x right, y down, z forward); the ground
    is the plane ``y = camera_height`` and the camera stays at ``y = 0``.
    """
    intrinsics: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(48.0, 48.0, 47.5, 15.5, 96, 64))
    num_frames: int = 200
    camera_height: float = 1.0
    wall_depth: float = 6.0
    wall_slope: float = 0.5  # extra wall depth per metre of height above the ground
    num_boxes: int = 100
    box_depth_range: tuple = (1.8, 4.5)
    box_size_range: tuple = (0.25, 0.9)
    base_speed: float = 2.5
    speed_variation: float = 0.3
    speed_period: float = 57.0
    forward_amplitude: float = 0.0
    dt: float = 0.1
    texture_scale: float = 2.5
    supersample: int = 3
    seed: int = 0
    boxes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self._table = rng.random((3, 256, 256))
        self._colors = rng.uniform(0.2, 0.8, size=(3, 3))
        if not self.boxes:
            x_end = self.positions()[-1, 0] + 2.0
            for _ in range(self.num_boxes):
                sx, sy, sz = rng.uniform(*self.box_size_range, size=3)
                x = rng.uniform(-3.0, x_end + 1.0)
                z = rng.uniform(*self.box_depth_range)
                lo = np.array([x, self.camera_height - sy, z])
                self.boxes.append(Box(lo, lo + np.array([sx, sy, sz]), rng.uniform(0, 200, size=2)))

    # -- trajectory -----------------------------------------------------------------
    def speeds(self) -> np.ndarray:
        t = np.arange(self.num_frames)
        return self.base_speed * (1 + self.speed_variation * np.sin(2 * np.pi * t / self.speed_period))

    def timestamps(self) -> np.ndarray:
        return np.arange(self.num_frames) * self.dt

    def positions(self) -> np.ndarray:
        """Camera centers [N, 3]. The path length between consecutive frames is
        ``speed[i] * dt`` exactly (speed is sampled at the start of each step)."""
        speeds = self.speeds()
        n = self.num_frames
        pos = np.zeros((n, 3))
        heading = np.zeros(n)
        if self.forward_amplitude:
            heading = self.forward_amplitude * np.sin(2 * np.pi * np.arange(n) / 31.0)
        for i in range(1, n):
            step = speeds[i - 1] * self.dt
            d = np.array([np.cos(heading[i - 1]), 0.0, np.sin(heading[i - 1])])
            pos[i] = pos[i - 1] + step * d
        return pos

    def camera_to_world(self, frame: int) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, 3] = self.positions()[frame]
        return mat

    def relative_pose(self, target: int, source: int) -> RigidTransform:
        """Transform mapping target-camera points into the source camera."""
        rel = np.linalg.inv(self.camera_to_world(source)) @ self.camera_to_world(target)
        return RigidTransform.from_matrix(torch.from_numpy(rel))

    # -- texture --------------------------------------------------------------------
    def _noise(self, channel: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        table = self._table[channel]
        out = np.zeros_like(x)
        amp, total = 1.0, 0.0
        for octave in range(3):
            f = self.texture_scale * (2 ** octave)
            xs, ys = x * f, y * f
            x0, y0 = np.floor(xs), np.floor(ys)
            fx, fy = xs - x0, ys - y0
            fx = fx * fx * (3 - 2 * fx)
            fy = fy * fy * (3 - 2 * fy)
            ix, iy = x0.astype(np.int64) % 256, y0.astype(np.int64) % 256
            ix1, iy1 = (ix + 1) % 256, (iy + 1) % 256
            v00, v10 = table[iy, ix], table[iy, ix1]
            v01, v11 = table[iy1, ix], table[iy1, ix1]
            top = v00 + (v10 - v00) * fx
            bottom = v01 + (v11 - v01) * fx
            out += amp * (top + (bottom - top) * fy)
            total += amp
            amp *= 0.5
        return out / total

    def _shade(self, u: np.ndarray, v: np.ndarray, surface: int) -> np.ndarray:
        base = self._colors[surface % 3]
        rgb = np.stack([self._noise(c, u + 17.0 * surface, v) for c in range(3)], axis=-1)
        return np.clip(0.15 + 0.7 * (0.35 * base + 0.65 * rgb), 0.0, 1.0)

    # -- ray casting ----------------------------------------------------------------
    @staticmethod
    def _lateral_cull(origins: np.ndarray, dirs: np.ndarray):
        """For rays sharing one origin and looking forward, return a conservative test
        ``box -> bool`` on whether any ray can reach the box laterally; else None."""
        if not (np.all(dirs[:, 2] > 0) and np.array_equal(origins.min(0), origins.max(0))):
            return None
        o = origins[0]
        slopes = dirs[:, 0] / dirs[:, 2]
        s_lo, s_hi = slopes.min(), slopes.max()

        def may_hit(box: Box) -> bool:
            dz = np.clip([box.lo[2] - o[2], box.hi[2] - o[2]], 0, None)
            if dz[1] <= 0:
                return False
            reach = np.concatenate([s_lo * dz, s_hi * dz]) + o[0]
            return reach.max() >= box.lo[0] and reach.min() <= box.hi[0]
        return may_hit

    def cast(self, origins: np.ndarray, dirs: np.ndarray):
        """Intersect rays [N, 3] with the scene; returns (ray parameter, colors [N, 3])."""
        n = dirs.shape[0]
        t_best = np.full(n, np.inf)
        surf = np.full(n, -1)
        uv = np.zeros((n, 2))

        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.camera_height - origins[:, 1]) / dirs[:, 1]
        hit = (t > 0) & np.isfinite(t)
        p = origins + t[:, None] * dirs
        upd = hit & (t < t_best)
        t_best[upd], surf[upd], uv[upd] = t[upd], 0, p[upd][:, [0, 2]]

        # wall plane: z + slope * y = wall_depth + slope * camera_height
        offset = self.wall_depth + self.wall_slope * self.camera_height
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (offset - origins[:, 2] - self.wall_slope * origins[:, 1]) / (dirs[:, 2] + self.wall_slope * dirs[:, 1])
        hit = (t > 0) & np.isfinite(t)
        p = origins + t[:, None] * dirs
        upd = hit & (t < t_best)
        t_best[upd], surf[upd], uv[upd] = t[upd], 1, p[upd][:, [0, 1]]

        inv = np.where(dirs == 0, 1e30, 1.0 / np.where(dirs == 0, 1.0, dirs))
        may_hit = self._lateral_cull(origins, dirs)
        for bi, box in enumerate(self.boxes):
            if may_hit is not None and not may_hit(box):
                continue
            t0 = (box.lo - origins) * inv
            t1 = (box.hi - origins) * inv
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            t_near = tmin.max(axis=1)
            t_far = tmax.min(axis=1)
            hit = (t_near <= t_far) & (t_near > 0)
            upd = hit & (t_near < t_best)
            if not upd.any():
                continue
            axis = tmin[upd].argmax(axis=1)
            p = origins[upd] + t_near[upd, None] * dirs[upd]
            # face coordinates: the two axes orthogonal to the hit normal
            face_uv = np.where(axis[:, None] == 0, p[:, [2, 1]],
                               np.where(axis[:, None] == 1, p[:, [0, 2]], p[:, [0, 1]]))
            t_best[upd] = t_near[upd]
            surf[upd] = 2 + bi
            uv[upd] = face_uv + box.texture_offset

        colors = np.zeros((n, 3))
        for s in np.unique(surf):
            sel = surf == s
            colors[sel] = self._shade(uv[sel, 0], uv[sel, 1], int(s))
        return t_best, colors


def render_synthetic(scene: SyntheticScene, frame: int):
    """Render one frame.

    Returns
    -------
    image : torch.Tensor [3, H, W] float32 in [0, 1]
    depth : torch.Tensor [1, H, W] float64, z-depth at pixel centers (m)
    pose : RigidTransform camera-to-world
    speed : float (m/s)
    """
    if not 0 <= frame < scene.num_frames:
        raise IndexError(f"frame {frame} outside trajectory of {scene.num_frames} frames")
    k = scene.intrinsics
    h, w = k.height, k.width
    origin = scene.positions()[frame]

    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    center_dirs = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], -1).reshape(-1, 3)
    t_center, _ = scene.cast(np.broadcast_to(origin, center_dirs.shape), center_dirs)
    depth = t_center.reshape(h, w)  # dirs have unit z, so ray parameter == z-depth

    s = scene.supersample
    offsets = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((h * w, 3))
    for oy in offsets:
        for ox in offsets:
            dirs = np.stack([(u + ox - k.cx) / k.fx, (v + oy - k.cy) / k.fy, np.ones_like(u)],
                            -1).reshape(-1, 3)
            _, col = scene.cast(np.broadcast_to(origin, dirs.shape), dirs)
            acc += col
    image = (acc / (s * s)).reshape(h, w, 3).transpose(2, 0, 1)

    pose = RigidTransform.from_matrix(torch.from_numpy(scene.camera_to_world(frame)))
    return (torch.from_numpy(image.astype(np.float32)), torch.from_numpy(depth)[None],
            pose, float(scene.speeds()[frame]))
