"""Monocular sequence datasets: on-disk loader and in-memory synthetic sequences.

On-disk layout (one directory per sequence)::

    <root>/<sequence>/calib.txt          intrinsics, see ``read_calibration``
    <root>/<sequence>/images/NNNNNN.png  RGB frames, zero-padded frame index
    <root>/<sequence>/depth/NNNNNN.png   optional 16-bit depth, value = metres * 256, 0 = invalid
    <root>/<sequence>/speed.txt          optional ``frame_index timestamp_s speed_mps`` per line
    <root>/exclude.txt                   optional ``sequence frame_index`` per line (static frames)
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import CameraIntrinsics, resize_intrinsics
from .synthetic import SyntheticScene, render_synthetic

DEPTH_SCALE = 256.0
CALIB_KEYS = ("fx", "fy", "cx", "cy", "width", "height")


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class CalibrationError(DatasetError, ValueError):
    pass


class FrameIndexError(DatasetError, IndexError):
    pass


class MissingContextError(DatasetError):
    """The requested target frame lacks a t-1 or t+1 neighbour."""


@dataclass
class ImageFrame:
    image: torch.Tensor  # [3, H, W] float32 in [0, 1]
    timestamp: float
    index: int


@dataclass
class SequenceSample:
    target: ImageFrame
    contexts: list  # [(ImageFrame, dt)] for t-1 then t+1
    intrinsics: CameraIntrinsics
    gt_depth: torch.Tensor | None = None  # [1, H, W] metres, 0 = invalid
    speed: float | None = None
    gt_poses: list | None = None  # optional target->context RigidTransforms (synthetic only)


# -- file formats ------------------------------------------------------------------------

def read_calibration(path) -> CameraIntrinsics:
    """Parse ``key value`` lines for fx, fy, cx, cy, width, height; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"calibration file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in CALIB_KEYS:
            raise CalibrationError(f"{path}:{lineno}: expected '<key> <value>', got {line!r}")
        try:
            values[parts[0]] = float(parts[1])
        except ValueError:
            raise CalibrationError(f"{path}:{lineno}: non-numeric value {parts[1]!r}") from None
    missing = [k for k in CALIB_KEYS if k not in values]
    if missing:
        raise CalibrationError(f"{path}: missing keys {missing}")
    try:
        return CameraIntrinsics(values["fx"], values["fy"], values["cx"], values["cy"],
                                int(values["width"]), int(values["height"]))
    except ValueError as e:
        raise CalibrationError(f"{path}: {e}") from None


def write_calibration(path, k: CameraIntrinsics):
    lines = [f"{key} {getattr(k, key)!r}" for key in CALIB_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")


def read_depth_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path))
    if arr.dtype != np.uint16 and arr.dtype != np.int32:
        raise DatasetError(f"{path}: depth raster must be 16-bit, got {arr.dtype}")
    return torch.from_numpy(arr.astype(np.float32) / DEPTH_SCALE)[None]


def write_depth_png(path, depth) -> None:
    """Write [H, W] or [1, H, W] metric depth as 16-bit PNG; values are rounded."""
    depth = np.asarray(depth.detach().cpu() if torch.is_tensor(depth) else depth, dtype=np.float64)
    depth = depth.reshape(depth.shape[-2:])
    raw = np.clip(np.round(depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def read_image(path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise MissingFileError(f"image not found: {path}") from None
    except OSError as e:
        raise DatasetError(f"unreadable image {path}: {e}") from None
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def write_image(path, image: torch.Tensor) -> None:
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_speed_table(path) -> dict:
    """``frame_index -> (timestamp_s, speed_mps)``."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{path}:{lineno}: expected 'frame_index timestamp_s speed_mps'")
        try:
            table[int(parts[0])] = (float(parts[1]), float(parts[2]))
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
    return table


def read_exclusions(path) -> set:
    out = set()
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) == 2:
            out.add((parts[0], int(parts[1])))
    return out


def resize_image(image: torch.Tensor, width: int, height: int) -> torch.Tensor:
    if image.shape[-2:] == (height, width):
        return image
    arr = (image.permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
    out = Image.fromarray(arr).resize((width, height), Image.BILINEAR)
    return torch.from_numpy(np.asarray(out, dtype=np.float32) / 255.0).permute(2, 0, 1).contiguous()


# -- on-disk sequences -------------------------------------------------------------------

class SequenceDataset:
    """Indexable set of (t-1, t, t+1) samples over every sequence under ``root``.

    ``resolution`` is ``(width, height)``; images are resized and intrinsics rescaled.
    Ground-truth depth stays at native resolution.
    """

    def __init__(self, root, resolution=None, default_dt: float = 0.1):
        self.root = Path(root)
        if not self.root.is_dir():
            raise MissingFileError(f"dataset root not found: {self.root}")
        self.resolution = resolution
        self.default_dt = default_dt
        self.sequences = sorted(p.name for p in self.root.iterdir()
                                if p.is_dir() and (p / "images").is_dir())
        if not self.sequences:
            raise MissingFileError(f"no sequences (directories with images/) under {self.root}")
        excl = self.root / "exclude.txt"
        self.excluded = read_exclusions(excl) if excl.exists() else set()
        self._frames = {s: self._frame_ids(s) for s in self.sequences}
        self.index = [(s, f) for s in self.sequences for f in self._frames[s]
                      if f - 1 in self._frames[s] and f + 1 in self._frames[s]
                      and (s, f) not in self.excluded]

    def _frame_ids(self, seq) -> list:
        return sorted(int(p.stem) for p in (self.root / seq / "images").glob("*.png"))

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i) -> SequenceSample:
        if not 0 <= i < len(self.index):
            raise FrameIndexError(f"sample {i} out of range [0, {len(self.index)})")
        seq, frame = self.index[i]
        return self.load(seq, frame)

    def frames(self, seq) -> list:
        return list(self._frames[seq])

    def load(self, seq: str, frame: int, require_context: bool = True) -> SequenceSample:
        if seq not in self._frames:
            raise MissingFileError(f"unknown sequence {seq!r}")
        frames = self._frames[seq]
        if frame not in frames:
            raise FrameIndexError(f"frame {frame} not in sequence {seq!r}")
        if require_context and (frame - 1 not in frames or frame + 1 not in frames):
            raise MissingContextError(f"frame {frame} of {seq!r} lacks a t-1/t+1 neighbour")
        d = self.root / seq
        k = read_calibration(d / "calib.txt")
        speed_path = d / "speed.txt"
        table = read_speed_table(speed_path) if speed_path.exists() else {}

        def frame_at(i):
            img = read_image(d / "images" / f"{i:06d}.png")
            if img.shape[-2:] != (k.height, k.width):
                raise CalibrationError(
                    f"{seq}/{i:06d}: image {img.shape[-1]}x{img.shape[-2]} vs calib {k.width}x{k.height}")
            ts = table[i][0] if i in table else i * self.default_dt
            return ImageFrame(img, ts, i)

        target = frame_at(frame)
        contexts = []
        if require_context:
            for i in (frame - 1, frame + 1):
                ctx = frame_at(i)
                contexts.append((ctx, ctx.timestamp - target.timestamp))
        depth_path = d / "depth" / f"{frame:06d}.png"
        gt = read_depth_png(depth_path) if depth_path.exists() else None
        speed = table[frame][1] if frame in table else None
        sample = SequenceSample(target, contexts, k, gt, speed)
        if self.resolution is not None:
            sample = resize_sample(sample, *self.resolution)
        return sample


def resize_sample(sample: SequenceSample, width: int, height: int) -> SequenceSample:
    k = sample.intrinsics
    if (k.width, k.height) == (width, height):
        return sample

    def rf(f: ImageFrame):
        return ImageFrame(resize_image(f.image, width, height), f.timestamp, f.index)

    return replace(sample, target=rf(sample.target),
                   contexts=[(rf(f), dt) for f, dt in sample.contexts],
                   intrinsics=resize_intrinsics(k, width, height))


def load_sample(root, index: int, sequence: str | None = None, resolution=None) -> SequenceSample:
    """Load frame ``index`` of ``sequence`` (default: first sequence) with its t-1/t+1 contexts."""
    ds = SequenceDataset(root, resolution=resolution)
    seq = sequence if sequence is not None else ds.sequences[0]
    if seq in ds._frames and ds._frames[seq] and not (
            ds._frames[seq][0] <= index <= ds._frames[seq][-1]):
        raise FrameIndexError(f"frame {index} out of range for sequence {seq!r}")
    if (seq, index) in ds.excluded:
        raise FrameIndexError(f"frame {index} of {seq!r} is on the exclusion list")
    return ds.load(seq, index)


def write_synthetic_sequence(scene: SyntheticScene, root, name: str = "seq00",
                             frames=None, with_depth: bool = True) -> Path:
    """Render ``scene`` into the on-disk layout; returns the sequence directory."""
    d = Path(root) / name
    (d / "images").mkdir(parents=True, exist_ok=True)
    if with_depth:
        (d / "depth").mkdir(exist_ok=True)
    write_calibration(d / "calib.txt", scene.intrinsics)
    frames = range(scene.num_frames) if frames is None else frames
    speeds, stamps = scene.speeds(), scene.timestamps()
    lines = []
    for i in frames:
        image, depth, _, _ = render_synthetic(scene, i)
        write_image(d / "images" / f"{i:06d}.png", image)
        if with_depth:
            write_depth_png(d / "depth" / f"{i:06d}.png", depth)
        lines.append(f"{i} {float(stamps[i])!r} {float(speeds[i])!r}")
    (d / "speed.txt").write_text("\n".join(lines) + "\n")
    return d


# -- synthetic in-memory sequences -------------------------------------------------------

class SyntheticSequence:
    """All frames of a :class:`SyntheticScene` rendered once and served as samples."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene
        rendered = [render_synthetic(scene, i) for i in range(scene.num_frames)]
        self.images = torch.stack([r[0] for r in rendered])
        self.depths = torch.stack([r[1] for r in rendered]).float()
        self.speeds = scene.speeds()
        self.stamps = scene.timestamps()
        self.index = list(range(1, scene.num_frames - 1))

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i) -> SequenceSample:
        if not 0 <= i < len(self.index):
            raise FrameIndexError(f"sample {i} out of range [0, {len(self.index)})")
        t = self.index[i]
        frame = lambda j: ImageFrame(self.images[j], float(self.stamps[j]), j)  # noqa: E731
        contexts = [(frame(j), float(self.stamps[j] - self.stamps[t])) for j in (t - 1, t + 1)]
        poses = [self.scene.relative_pose(t, j) for j in (t - 1, t + 1)]
        return SequenceSample(frame(t), contexts, self.scene.intrinsics, self.depths[t],
                              float(self.speeds[t]), poses)


# -- augmentation and batching -----------------------------------------------------------

@dataclass
class Augmentation:
    flip: bool = True
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    enabled: bool = True


def augment(sample: SequenceSample, aug: Augmentation, rng: np.random.Generator) -> SequenceSample:
    """Identical flip + color jitter on target and contexts; flipping mirrors ``cx``."""
    if not aug.enabled:
        return sample
    do_flip = aug.flip and rng.random() < 0.5
    b = 1 + rng.uniform(-aug.brightness, aug.brightness)
    c = 1 + rng.uniform(-aug.contrast, aug.contrast)
    s = 1 + rng.uniform(-aug.saturation, aug.saturation)

    def jitter(img):
        img = img * b
        mean = img.mean()
        img = (img - mean) * c + mean
        gray = img.mean(0, keepdim=True)
        img = (img - gray) * s + gray
        img = img.clamp(0, 1)
        return img.flip(-1) if do_flip else img

    def af(f: ImageFrame):
        return ImageFrame(jitter(f.image), f.timestamp, f.index)

    k = sample.intrinsics.flipped() if do_flip else sample.intrinsics
    gt = sample.gt_depth.flip(-1) if (do_flip and sample.gt_depth is not None) else sample.gt_depth
    poses = sample.gt_poses
    if do_flip and poses is not None:
        poses = [_mirror_pose(p) for p in poses]
    return replace(sample, target=af(sample.target),
                   contexts=[(af(f), dt) for f, dt in sample.contexts],
                   intrinsics=k, gt_depth=gt, gt_poses=poses)


def _mirror_pose(p):
    from .geometry import RigidTransform
    m = torch.diag(torch.tensor([-1.0, 1.0, 1.0], dtype=p.rotation.dtype))
    return RigidTransform(m @ p.rotation @ m, p.translation * m.diagonal())


def collate(samples: list) -> dict:
    """Stack samples into tensors: target [B,3,H,W], sources list, K [B,3,3], speed, dt [B,S]."""
    batch = {
        "target": torch.stack([s.target.image for s in samples]),
        "sources": [torch.stack([s.contexts[j][0].image for s in samples])
                    for j in range(len(samples[0].contexts))],
        "intrinsics": torch.stack([s.intrinsics.matrix() for s in samples]),
        "dt": torch.tensor([[dt for _, dt in s.contexts] for s in samples], dtype=torch.float32),
    }
    if all(s.speed is not None for s in samples):
        batch["speed"] = torch.tensor([s.speed for s in samples], dtype=torch.float32)
    return batch
