"""Joint optimisation of the depth and pose networks, checkpoints and logs."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .data import (Augmentation, SequenceDataset, SyntheticSequence, augment, collate)
from .depthnet import PackNet, PackNetConfig, invdepth_to_depth
from .geometry import resize_intrinsics
from .losses import PhotometricContext, VelocityRecord, total_loss
from .posenet import PoseNet
from .synthetic import SyntheticScene

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "packdepth-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def lr_schedule(epoch: int, cfg: TrainConfig) -> tuple:
    """Step decay: ``lr * factor ** -(epoch // every)`` for (depth, pose)."""
    k = cfg.lr_decay_factor ** (-(epoch // cfg.lr_decay_every))
    return cfg.lr_depth * k, cfg.lr_pose * k


@dataclass
class TrainState:
    depth_net: PackNet
    pose_net: PoseNet
    optimizer: torch.optim.Optimizer
    cfg: TrainConfig
    epoch: int = 0
    step: int = 0


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    depth_net = PackNet(cfg.depth_config)
    pose_net = PoseNet()
    optimizer = torch.optim.Adam(
        [{"params": depth_net.parameters(), "lr": cfg.lr_depth, "name": "depth"},
         {"params": pose_net.parameters(), "lr": cfg.lr_pose, "name": "pose"}],
        betas=(cfg.adam_beta1, cfg.adam_beta2))
    return TrainState(depth_net, pose_net, optimizer, cfg)


def set_epoch_lr(state: TrainState, epoch: int) -> None:
    lr_d, lr_p = lr_schedule(epoch, state.cfg)
    state.optimizer.param_groups[0]["lr"] = lr_d
    state.optimizer.param_groups[1]["lr"] = lr_p


def compute_loss(state: TrainState, batch: dict):
    cfg = state.cfg
    target = batch["target"]
    inv_depths = state.depth_net(target)
    poses = [state.pose_net(target, src) for src in batch["sources"]]
    velocity = None
    if cfg.velocity_supervision:
        if "speed" not in batch:
            raise ValueError("velocity supervision requested but the batch carries no speed")
        velocity = VelocityRecord(batch["speed"], batch["dt"])
    ctx = PhotometricContext(target, batch["sources"], batch["intrinsics"])
    return total_loss(ctx, inv_depths, poses, cfg.loss_weights, velocity,
                      depth_range=(cfg.min_depth, cfg.max_depth))


def train_step(batch: dict, state: TrainState) -> tuple:
    """One Adam update on both networks; returns ``(state, diagnostics)``."""
    state.depth_net.train()
    state.pose_net.train()
    loss, diag = compute_loss(state, batch)
    for name in ("photometric", "smoothness", "velocity", "loss"):
        if not math.isfinite(diag[name]):
            raise NonFiniteLossError(f"non-finite {name} term at step {state.step}: {diag[name]}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    diag["step"] = state.step
    diag["epoch"] = state.epoch
    return state, diag


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState) -> None:
    """Atomically write networks, optimizer moments, config and RNG state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "depth_config": state.depth_net.cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "depth_state": state.depth_net.state_dict(),
        "pose_state": state.pose_net.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, state: TrainState | None = None, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a checkpoint, into ``state`` if given (its depth config must match)."""
    payload = read_checkpoint(path)
    stored = PackNetConfig(**payload["depth_config"])
    if state is None:
        if cfg is None:
            cfg = TrainConfig(**payload["train_config"])
        state = init_state(cfg)
    if state.depth_net.cfg.to_dict() != stored.to_dict():
        raise ConfigMismatchError(
            f"checkpoint depth config {stored.to_dict()} does not match {state.depth_net.cfg.to_dict()}")
    try:
        state.depth_net.load_state_dict(payload["depth_state"])
        state.pose_net.load_state_dict(payload["pose_state"])
        state.optimizer.load_state_dict(payload["optimizer_state"])
    except (RuntimeError, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: parameters do not fit the network: {e}") from None
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    torch.set_rng_state(payload["torch_rng"])
    return state


def load_depth_net(path) -> tuple:
    """Depth network and train config from a checkpoint, in eval mode."""
    payload = read_checkpoint(path)
    net = PackNet(PackNetConfig(**payload["depth_config"]))
    net.load_state_dict(payload["depth_state"])
    net.eval()
    return net, TrainConfig(**payload["train_config"])


# -- data plumbing -----------------------------------------------------------------------

def build_dataset(cfg: TrainConfig):
    if cfg.dataset == "synthetic":
        scene = SyntheticScene(num_frames=cfg.synthetic_frames, seed=cfg.synthetic_seed)
        if (scene.intrinsics.width, scene.intrinsics.height) != (cfg.width, cfg.height):
            scene = SyntheticScene(intrinsics=resize_intrinsics(scene.intrinsics, cfg.width, cfg.height),
                                   num_frames=cfg.synthetic_frames, seed=cfg.synthetic_seed)
        return SyntheticSequence(scene)
    return SequenceDataset(cfg.dataset, resolution=(cfg.width, cfg.height))


def batch_indices(n: int, cfg: TrainConfig, epoch: int, i: int) -> np.ndarray:
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    start = (i * cfg.batch_size) % max(n - cfg.batch_size + 1, 1)
    return perm[start:start + cfg.batch_size]


def steps_per_epoch(n: int, cfg: TrainConfig) -> int:
    return cfg.steps_per_epoch or max(n // cfg.batch_size, 1)


def make_batch(dataset, cfg: TrainConfig, epoch: int, i: int, step: int) -> dict:
    rng = np.random.default_rng([cfg.seed, 7, step])
    aug = Augmentation(enabled=cfg.augment)
    samples = [augment(dataset[int(j)], aug, rng) for j in batch_indices(len(dataset), cfg, epoch, i)]
    return collate(samples)


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")


def fit(cfg: TrainConfig, dataset=None, state: TrainState | None = None, resume: bool = False,
        callback=None) -> TrainState:
    """Train until ``cfg.epochs`` (or ``cfg.max_steps``) is reached.

    Writes ``<output_dir>/log.jsonl`` and ``<output_dir>/checkpoint.pt``.
    """
    out = Path(cfg.output_dir)
    ckpt = out / "checkpoint.pt"
    if resume:
        if not ckpt.exists():
            raise CheckpointError(f"--resume given but no checkpoint at {ckpt}")
        state = load_checkpoint(ckpt, init_state(cfg))
    dataset = dataset if dataset is not None else build_dataset(cfg)
    state = state or init_state(cfg)
    logger = JsonlLogger(out / "log.jsonl")
    if state.step == 0:
        logger.write({"event": "config", "config": cfg.to_dict()})
    per_epoch = steps_per_epoch(len(dataset), cfg)
    t0 = time.time()
    while state.epoch < cfg.epochs:
        set_epoch_lr(state, state.epoch)
        while state.step < (state.epoch + 1) * per_epoch:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                save_checkpoint(ckpt, state)
                return state
            i = state.step - state.epoch * per_epoch
            batch = make_batch(dataset, cfg, state.epoch, i, state.step)
            state, diag = train_step(batch, state)
            diag["time"] = time.time() - t0
            if cfg.log_every and state.step % cfg.log_every == 0:
                logger.write(diag)
            if callback is not None:
                callback(state, diag)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt, state)
        state.epoch += 1
    save_checkpoint(ckpt, state)
    return state


# -- inference ---------------------------------------------------------------------------

@torch.no_grad()
def predict_depth(depth_net: PackNet, image: torch.Tensor, d_min: float, d_max: float,
                  out_size=None) -> torch.Tensor:
    """Metric depth [B, 1, H, W] from the finest scale, nearest-resized to ``out_size``."""
    depth_net.eval()
    inv = depth_net(image)[0]
    if out_size is not None and tuple(inv.shape[-2:]) != tuple(out_size):
        inv = F.interpolate(inv, size=tuple(out_size), mode="nearest")
    return invdepth_to_depth(inv, d_min, d_max)


@torch.no_grad()
def predict_pose(pose_net: PoseNet, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
    pose_net.eval()
    return pose_net(target, source)
