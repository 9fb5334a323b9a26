"""Depth metrics (median scaling, range bins) and pose ATE over short snippets."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .geometry import RigidTransform

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


@dataclass
class MetricReport:
    abs_rel: float = float("nan")
    sq_rel: float = float("nan")
    rmse: float = float("nan")
    rmse_log: float = float("nan")
    a1: float = float("nan")
    a2: float = float("nan")
    a3: float = float("nan")
    n_pixels: int = 0

    @property
    def empty(self) -> bool:
        return self.n_pixels == 0

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, k) for k in METRIC_NAMES)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalConfig:
    min_depth: float = 1e-3
    max_depth: float = 80.0
    median_scaling: bool = True
    range_bins: list | None = None

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError(f"need 0 < min_depth < max_depth, got {self.min_depth}, {self.max_depth}")
        if self.range_bins:
            self.range_bins = [tuple(map(float, b)) for b in self.range_bins]
            prev_hi = -np.inf
            for lo, hi in self.range_bins:
                if not lo < hi or lo < prev_hi:
                    raise ValueError(f"range bins must be ascending and non-overlapping: {self.range_bins}")
                prev_hi = hi


def _np(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def valid_mask(gt: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    """Sparse ground truth: 0 means no return; keep pixels inside [min_depth, max_depth]."""
    return (gt > 0) & (gt >= cfg.min_depth) & (gt <= cfg.max_depth)


def median_scale(pred, gt, mask=None) -> tuple:
    """Scale ``pred`` by ``median(gt) / median(pred)`` over valid ground-truth pixels.

    Returns ``(scaled_pred, ratio)``.
    """
    pred, gt = _np(pred), _np(gt)
    mask = gt > 0 if mask is None else mask
    if not mask.any():
        raise ValueError("median scaling needs at least one valid ground-truth pixel")
    ratio = float(np.median(gt[mask]) / np.median(pred[mask]))
    return pred * ratio, ratio


def _errors(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    thresh = np.maximum(gt / pred, pred / gt)
    diff = gt - pred
    return MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        a1=float(np.mean(thresh < 1.25)),
        a2=float(np.mean(thresh < 1.25 ** 2)),
        a3=float(np.mean(thresh < 1.25 ** 3)),
        n_pixels=int(gt.size),
    )


def _prepare(pred, gt, cfg: EvalConfig):
    pred, gt = _np(pred), _np(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    mask = valid_mask(gt, cfg)
    if not mask.any():
        raise ValueError("no valid ground-truth pixels in the evaluation range")
    ratio = 1.0
    if cfg.median_scaling:
        pred, ratio = median_scale(pred, gt, mask)
    pred = np.clip(pred, cfg.min_depth, cfg.max_depth)
    return pred, gt, mask, ratio


def depth_metrics(pred, gt, cfg: EvalConfig | None = None) -> MetricReport:
    """Standard depth errors on valid ground-truth pixels; predictions clamped to the range."""
    cfg = cfg or EvalConfig()
    pred, gt, mask, _ = _prepare(pred, gt, cfg)
    return _errors(pred[mask], gt[mask])


def binned_metrics(pred, gt, cfg: EvalConfig) -> list:
    """Per-range reports over ``cfg.range_bins``; the scaling ratio comes from the full range.

    A pixel belongs to ``[lo, hi)``, except that the last bin also takes ``gt == hi``.
    Bins without pixels yield an empty :class:`MetricReport`.
    """
    pred, gt, mask, _ = _prepare(pred, gt, cfg)
    bins = cfg.range_bins or []
    out = []
    for i, (lo, hi) in enumerate(bins):
        upper = gt <= hi if i == len(bins) - 1 else gt < hi
        sel = mask & (gt >= lo) & upper
        out.append(((lo, hi), _errors(pred[sel], gt[sel]) if sel.any() else MetricReport()))
    return out


def aggregate(reports: list) -> MetricReport:
    """Mean of per-frame metrics (frames weigh equally); ``n_pixels`` is the total."""
    reports = [r for r in reports if not r.empty]
    if not reports:
        return MetricReport()
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return MetricReport(**vals, n_pixels=sum(r.n_pixels for r in reports))


def range_bins(max_depth: float, width: float) -> list:
    edges = np.arange(0.0, max_depth + 1e-9, width)
    if edges[-1] < max_depth:
        edges = np.append(edges, max_depth)
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


# -- pose --------------------------------------------------------------------------------

def _as_matrices(transforms) -> np.ndarray:
    mats = []
    for t in transforms:
        if isinstance(t, RigidTransform):
            t = t.matrix()
        mats.append(_np(t))
    return np.stack(mats) if mats else np.zeros((0, 4, 4))


def compose_snippets(relative, length: int = 5) -> np.ndarray:
    """Chain relative poses into overlapping snippets of ``length`` absolute poses.

    ``relative[j]`` maps frame ``j + 1`` coordinates into frame ``j`` (the pose network
    output for target ``j + 1`` and source ``j``). Snippet ``i`` holds the poses of frames
    ``i .. i + length - 1`` expressed in frame ``i``, so its first pose is the identity.

    Returns an array [num_snippets, length, 4, 4].
    """
    rel = _as_matrices(relative)
    if len(rel) < length - 1:
        raise ValueError(f"need at least {length - 1} relative poses, got {len(rel)}")
    out = np.empty((len(rel) - length + 2, length, 4, 4))
    for i in range(out.shape[0]):
        out[i, 0] = np.eye(4)
        for k in range(1, length):
            out[i, k] = out[i, k - 1] @ rel[i + k - 1]
    return out


def ate(pred_snippet, gt_snippet, scale_with_gt: bool = False) -> float:
    """Root-mean-square position error over one snippet of absolute poses [N, 4, 4].

    With ``scale_with_gt`` predicted positions are multiplied by
    ``sum ||p_gt|| / sum ||p_pred||`` first.
    """
    pred, gt = _np(pred_snippet), _np(gt_snippet)
    if pred.shape != gt.shape:
        raise ValueError(f"snippet shapes differ: {pred.shape} vs {gt.shape}")
    p_pred, p_gt = pred[:, :3, 3], gt[:, :3, 3]
    if scale_with_gt:
        denom = np.linalg.norm(p_pred, axis=1).sum()
        if denom > 0:
            p_pred = p_pred * (np.linalg.norm(p_gt, axis=1).sum() / denom)
    return float(np.sqrt(np.mean(np.sum((p_pred - p_gt) ** 2, axis=1))))


def trajectory_ate(pred_relative, gt_relative, length: int = 5, scale_with_gt: bool = False) -> tuple:
    """Mean and standard deviation of ATE over all overlapping snippets."""
    ps, gs = compose_snippets(pred_relative, length), compose_snippets(gt_relative, length)
    errs = np.array([ate(p, g, scale_with_gt) for p, g in zip(ps, gs)])
    return float(errs.mean()), float(errs.std())


# -- reporting ---------------------------------------------------------------------------

def write_jsonl(path, frame_reports: list, aggregate_report: MetricReport, bins=None) -> None:
    """One record per frame, then one aggregate record (plus per-bin aggregates if given)."""
    with open(path, "w") as f:
        for name, rep in frame_reports:
            f.write(json.dumps({"kind": "frame", "frame": name, **rep.to_dict()}) + "\n")
        f.write(json.dumps({"kind": "aggregate", **aggregate_report.to_dict()}) + "\n")
        for (lo, hi), rep in bins or []:
            f.write(json.dumps({"kind": "bin", "lo": lo, "hi": hi, **rep.to_dict()}) + "\n")


def read_jsonl(path) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def format_table(rows: list) -> str:
    """Render ``(label, MetricReport)`` rows as a fixed-width table."""
    header = f"{'':<24}" + "".join(f"{h:>10}" for h in
                                   ("Abs Rel", "Sq Rel", "RMSE", "RMSElog", "d<1.25", "d<1.25^2", "d<1.25^3"))
    lines = [header, "-" * len(header)]
    for label, rep in rows:
        lines.append(f"{label:<24}" + "".join(f"{v:>10.3f}" for v in rep.as_tuple()))
    return "\n".join(lines)
