"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Criteria 3 and 4 train the tiny configuration on the synthetic scene and take roughly
half an hour each on one CPU core. Everything else runs in seconds to minutes.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import torch

import eval_oracle
from test_metrics import oracle_metrics, random_instance, random_se3

from packdepth.cli import main
from packdepth.config import load_config
from packdepth.data import collate
from packdepth.depthnet import PackNet, count_parameters, depth_to_space, space_to_depth
from packdepth.geometry import PixelGrid, bilinear_sample, pose_vec_to_transform, warp
from packdepth.losses import (LossWeights, PhotometricContext, VelocityRecord, auto_mask,
                              min_reprojection, photometric_loss, smoothness_loss, ssim,
                              total_loss, velocity_loss)
from packdepth.metrics import (EvalConfig, aggregate, ate, binned_metrics, compose_snippets,
                               depth_metrics, median_scale, range_bins, trajectory_ate)
from packdepth.trainer import build_dataset, load_checkpoint, init_state, predict_depth, predict_pose

D = torch.float64
ROOT = Path(__file__).resolve().parents[1]
TINY_CONFIG = ROOT / "configs" / "synthetic_tiny.yaml"
TRAIN_BUDGET_S = 30 * 60


# -- 1. single-image reconstruction ------------------------------------------------------

def test_criterion_1_pack_unpack_reconstruction(tmp_path, record):
    assert main(["reconstruct-demo", "--output", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    pack, pool = rep["pack_unpack_l1"], rep["pool_bilinear_l1"]
    ok = pack <= pool / 3 and pack <= 0.02 and rep["steps"] == 2000
    assert record(1, ok, f"pack/unpack L1 {pack:.4f}, pool/bilinear L1 {pool:.4f} "
                         f"(ratio {pool / pack:.1f}x; need >= 3x and pack <= 0.02)")


# -- 2. architecture ---------------------------------------------------------------------

TABLE_ROWS = {  # row: (channels, height, width) for a 640x192 input
    1: (64, 192, 640), 2: (64, 96, 320), 3: (64, 48, 160), 4: (128, 24, 80), 5: (256, 12, 40),
    6: (512, 6, 20), 7: (512, 12, 40), 8: (256, 24, 80), 9: (1, 24, 80), 10: (128, 48, 160),
    11: (1, 48, 160), 12: (64, 96, 320), 13: (1, 96, 320), 14: (64, 192, 640), 15: (1, 192, 640),
}


def test_criterion_2_architecture(record):
    torch.manual_seed(0)
    net = PackNet().eval()
    with torch.no_grad():
        rows = net.forward_rows(torch.rand(1, 3, 192, 640))
    wrong = {r: tuple(rows[r].shape[1:]) for r, s in TABLE_ROWS.items() if tuple(rows[r].shape[1:]) != s}
    n = count_parameters(net)
    ok = not wrong and abs(n - 128e6) / 128e6 <= 0.05
    assert record(2, ok, f"{len(TABLE_ROWS) - len(wrong)}/15 row shapes exact, "
                         f"{n / 1e6:.1f}M parameters (128M +- 5%)" + (f", mismatches {wrong}" if wrong else ""))


# -- 3 / 4. synthetic end-to-end training ------------------------------------------------

def _train(tmp_path_factory, velocity: bool):
    out = tmp_path_factory.mktemp("velocity" if velocity else "monocular")
    cfg = load_config(TINY_CONFIG, {"output_dir": str(out), "velocity_supervision": velocity})
    dataset = build_dataset(cfg)
    start = time.monotonic()
    argv = ["train", "--config", str(TINY_CONFIG), "--output-dir", str(out),
            "--velocity-supervision", str(velocity).lower()]
    assert main(argv) == 0
    elapsed = time.monotonic() - start
    state = load_checkpoint(out / "checkpoint.pt", init_state(cfg))
    return cfg, dataset, state, elapsed


def _synthetic_scores(cfg, dataset, state):
    """Per-frame depth predictions against the analytic depth, and pose magnitudes."""
    samples = [dataset[i] for i in range(len(dataset))]
    preds, gts, ratios = [], [], []
    for i in range(0, len(samples), 16):
        batch = collate(samples[i:i + 16])
        pred = predict_depth(state.depth_net, batch["target"], cfg.min_depth, cfg.max_depth)
        preds += list(pred[:, 0].numpy().astype(np.float64))
        gts += [s.gt_depth[0].numpy().astype(np.float64) for s in samples[i:i + 16]]
        # source 1 is the next frame; ||t|| should equal speed * |dt|
        t = predict_pose(state.pose_net, batch["target"], batch["sources"][1])[:, 3:].norm(dim=1)
        ratios += (t / (batch["speed"] * batch["dt"][:, 1].abs())).tolist()
    eval_cfg = EvalConfig(max_depth=cfg.max_depth)
    scaled = aggregate([depth_metrics(p, g, eval_cfg) for p, g in zip(preds, gts)])
    # median of per-pixel pred / gt; median(pred) / median(gt) is biased here because more
    # than half of the gt pixels sit on one constant-depth wall
    depth_ratio = float(np.median(np.concatenate([(p / g).ravel() for p, g in zip(preds, gts)])))
    return scaled, depth_ratio, float(np.mean(ratios))


def test_criterion_3_synthetic_monocular(tmp_path_factory, record):
    cfg, dataset, state, elapsed = _train(tmp_path_factory, velocity=False)
    scaled, _, _ = _synthetic_scores(cfg, dataset, state)
    ok = scaled.abs_rel < 0.15 and scaled.a1 > 0.80 and elapsed <= TRAIN_BUDGET_S
    assert record(3, ok, f"median-scaled abs_rel {scaled.abs_rel:.3f} (< 0.15), a1 {scaled.a1:.3f} (> 0.80), "
                         f"{state.step} steps in {elapsed / 60:.1f} min (<= 30)")


def test_criterion_4_synthetic_velocity(tmp_path_factory, record):
    cfg, dataset, state, elapsed = _train(tmp_path_factory, velocity=True)
    _, depth_ratio, t_ratio = _synthetic_scores(cfg, dataset, state)
    ok = 0.9 <= depth_ratio <= 1.1 and 0.9 <= t_ratio <= 1.1 and elapsed <= TRAIN_BUDGET_S
    assert record(4, ok, f"unscaled median depth ratio {depth_ratio:.3f}, ||t||/(|v| dt) {t_ratio:.3f} "
                         f"(both in [0.9, 1.1]), {state.step} steps in {elapsed / 60:.1f} min")


# -- 5. gradients ------------------------------------------------------------------------

def _fd_relative_error(fn, inputs, eps=1e-6):
    """|| central FD gradient - autograd gradient || / || autograd gradient || over all inputs."""
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*inputs), inputs)
    num, den = 0.0, 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            flat = x.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                fp = float(fn(*inputs))
                flat[i] = orig - eps
                fm = float(fn(*inputs))
                flat[i] = orig
                fd = (fp - fm) / (2 * eps)
                num += (fd - float(g.view(-1)[i])) ** 2
                den += float(g.view(-1)[i]) ** 2
    return math.sqrt(num / den)


def _gradient_cases():
    g = torch.Generator().manual_seed(0)

    def rand(*shape, lo=0.1, hi=0.9):
        return lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=D)

    k = torch.tensor([[[16.0, 0, 7.5], [0, 16.0, 7.5], [0, 0, 1]]], dtype=D)
    weights = rand(1, 3, 16, 16)  # fixed projection of map-valued outputs to a scalar

    def reduce(x):
        return (x * weights[:, :x.shape[1]]).sum()

    coords = torch.stack(torch.meshgrid(torch.arange(16.0, dtype=D), torch.arange(16.0, dtype=D),
                                        indexing="xy"), -1)[None] + rand(1, 16, 16, 2, lo=-0.45, hi=0.45) + 0.5

    def sample(img, c):
        return reduce(bilinear_sample(img, PixelGrid(c, torch.ones(1, 1, 16, 16, dtype=torch.bool))))

    def warp_fn(src, depth, vec):
        out, _ = warp(src, depth, pose_vec_to_transform(vec), k)
        return reduce(out)

    vel = VelocityRecord(torch.tensor([1.5], dtype=D), torch.tensor([[-0.1, 0.1]], dtype=D))
    target, s0, s1 = rand(1, 3, 16, 16), rand(1, 3, 16, 16), rand(1, 3, 16, 16)
    ctx = PhotometricContext(target, [s0, s1], k)
    invs = [rand(1, 1, 16 >> s, 16 >> s, lo=0.2, hi=0.8) for s in range(4)]
    poses = [0.02 * torch.randn(1, 6, generator=g, dtype=D) for _ in range(2)]

    def total(*ps):
        return total_loss(ctx, list(ps[:4]), list(ps[4:]), LossWeights(lambda1=0.01, lambda2=0.5),
                          velocity=vel)[0]

    return {
        "ssim": (lambda a, b: reduce(ssim(a, b)), [rand(1, 3, 16, 16), rand(1, 3, 16, 16)]),
        "photometric": (lambda a, b: reduce(photometric_loss(a, b)), [rand(1, 3, 16, 16), rand(1, 3, 16, 16)]),
        "smoothness": (smoothness_loss, [rand(1, 1, 16, 16), rand(1, 3, 16, 16)]),
        "velocity": (lambda t: velocity_loss(t, vel), [torch.randn(1, 2, 3, generator=g, dtype=D)]),
        "bilinear": (sample, [rand(1, 3, 16, 16), coords]),
        "warp": (warp_fn, [rand(1, 3, 16, 16), rand(1, 1, 16, 16, lo=2, hi=4),
                           torch.tensor([[0.01, -0.02, 0.015, 0.05, -0.03, 0.02]], dtype=D)]),
        "total_loss": (total, invs + poses),
    }


def test_criterion_5_gradient_suite(record):
    errors = {name: _fd_relative_error(fn, xs) for name, (fn, xs) in _gradient_cases().items()}
    worst = max(errors, key=errors.get)
    ok = all(e <= 1e-3 for e in errors.values())
    assert record(5, ok, f"{len(errors)} functions, worst relative FD error {errors[worst]:.1e} ({worst}); "
                         + ", ".join(f"{k} {v:.0e}" for k, v in errors.items()))


# -- 6. oracle equivalence ---------------------------------------------------------------

def _brute_median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


def _oracle_checks(trials=100):
    rng = np.random.default_rng(2024)
    worst = dict.fromkeys(("depth_metrics", "median_scale", "binned_metrics", "min_reprojection",
                           "auto_mask", "snippets"), 0.0)
    fields = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
    bins = range_bins(80, 20)
    for trial in range(trials):
        pred, gt = random_instance(rng, (7, 9))
        scale = bool(trial % 2)
        got = depth_metrics(pred, gt, EvalConfig(median_scaling=scale))
        ref, _ = oracle_metrics(pred, gt, 1e-3, 80.0, scale)
        worst["depth_metrics"] = max(worst["depth_metrics"], *(abs(getattr(got, f) - ref[f]) for f in fields))

        mask = gt > 0
        _, ratio = median_scale(pred, gt, mask)
        ref_ratio = _brute_median(gt[mask].tolist()) / _brute_median(pred[mask].tolist())
        worst["median_scale"] = max(worst["median_scale"], abs(ratio - ref_ratio))

        for i, ((lo, hi), rep) in enumerate(binned_metrics(pred, gt, EvalConfig(range_bins=bins))):
            if not rep.empty:
                ref, _ = oracle_metrics(pred, gt, 1e-3, 80.0, True, (lo, hi, i == len(bins) - 1))
                worst["binned_metrics"] = max(worst["binned_metrics"], *(abs(getattr(rep, f) - ref[f]) for f in fields))

        maps = [torch.from_numpy(rng.random((4, 4))) for _ in range(3)]
        out = min_reprojection(maps).numpy()
        ref = [[min(float(m[i, j]) for m in maps) for j in range(4)] for i in range(4)]
        worst["min_reprojection"] = max(worst["min_reprojection"], float(np.abs(out - ref).max()))

        t = torch.from_numpy(rng.random((1, 3, 5, 5)))
        srcs = [torch.from_numpy(rng.random((1, 3, 5, 5))) for _ in range(2)]
        syn = [torch.from_numpy(rng.random((1, 3, 5, 5))) for _ in range(2)]
        mask_out = auto_mask(t, srcs, syn)
        lu = [photometric_loss(t, s) for s in srcs]
        lw = [photometric_loss(t, s) for s in syn]
        mismatches = sum(bool(mask_out[0, 0, i, j]) != (min(float(m[0, 0, i, j]) for m in lu)
                                                        > min(float(m[0, 0, i, j]) for m in lw))
                         for i in range(5) for j in range(5))
        worst["auto_mask"] = max(worst["auto_mask"], float(mismatches))

        rel = [random_se3(rng) for _ in range(int(rng.integers(4, 9)))]
        snips = compose_snippets(rel, 5)
        for i in range(snips.shape[0]):
            acc = np.eye(4)
            for k in range(5):
                if k:
                    acc = acc @ rel[i + k - 1]
                worst["snippets"] = max(worst["snippets"], float(np.abs(snips[i, k] - acc).max()))
    return worst


def test_criterion_6_oracle_equivalence(record):
    worst = _oracle_checks()
    ok = all(v <= 1e-9 for v in worst.values())
    assert record(6, ok, "100 trials each, max deviation: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# -- 7. invariances ----------------------------------------------------------------------

def test_criterion_7_invariance_suite(record):
    rng = np.random.default_rng(7)
    fields = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
    metric_dev = 0.0
    for _ in range(50):
        pred, gt = random_instance(rng)
        base = depth_metrics(pred, gt)
        for c in (0.1, 3.0, 42.0):
            other = depth_metrics(c * pred, gt)
            metric_dev = max(metric_dev, *(abs(getattr(base, f) - getattr(other, f)) for f in fields))

    ate_dev = 0.0
    for _ in range(50):
        pred = compose_snippets([random_se3(rng) for _ in range(4)])[0]
        gt = compose_snippets([random_se3(rng) for _ in range(4)])[0]
        scaled = pred.copy()
        scaled[:, :3, 3] *= rng.uniform(0.01, 100)
        ref = ate(pred, gt, scale_with_gt=True)
        ate_dev = max(ate_dev, abs(ate(scaled, gt, scale_with_gt=True) - ref) / max(ref, 1e-12))

    s2d_exact = True
    for _ in range(50):
        r = int(rng.integers(1, 4))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), r * int(rng.integers(1, 6)), r * int(rng.integers(1, 6)))
        x = torch.from_numpy(rng.random(shape))
        y = torch.from_numpy(rng.random((shape[0], shape[1] * r * r, shape[2] // r, shape[3] // r)))
        s2d_exact &= torch.equal(depth_to_space(space_to_depth(x, r), r), x)
        s2d_exact &= torch.equal(space_to_depth(depth_to_space(y, r), r), y)

    ok = metric_dev <= 1e-9 and ate_dev <= 1e-9 and s2d_exact
    assert record(7, ok, f"median-scaled metrics max change {metric_dev:.1e}, scaled ATE max relative change "
                         f"{ate_dev:.1e}, Space2Depth/Depth2Space round trips exact: {s2d_exact}")


# -- 8. evaluation pipeline on a frozen fixture -----------------------------------------

def test_criterion_8_evaluation_fixture(tmp_path, record):
    fixture = eval_oracle.FIXTURE
    expected = json.loads((fixture / "expected.json").read_text())
    oracle = eval_oracle.depth_report()
    oracle_ate = eval_oracle.ate_report()
    # the hand-written oracle must still reproduce the frozen numbers
    drift = max(abs(oracle[k] - v) for k, v in expected["median_scaled"].items())
    drift = max(drift, abs(oracle_ate[0] - expected["ate_mean"]), abs(oracle_ate[1] - expected["ate_std"]))

    assert main(["evaluate", "--dataset", str(fixture / "gt"), "--predictions", str(fixture / "pred"),
                 "--output", str(tmp_path)]) == 0
    agg = next(r for r in map(json.loads, open(tmp_path / "report.jsonl")) if r["kind"] == "aggregate")
    depth_dev = max(abs(agg[k] - v) for k, v in expected["median_scaled"].items())
    poses = json.loads((fixture / "poses.json").read_text())
    mean, std = trajectory_ate(poses["pred"], poses["gt"], scale_with_gt=True)
    ate_dev = max(abs(mean - expected["ate_mean"]), abs(std - expected["ate_std"]))

    ok = drift <= 1e-12 and depth_dev <= 1e-6 and ate_dev <= 1e-6
    assert record(8, ok, f"10-frame fixture: evaluate vs hand-checked oracle max deviation {depth_dev:.1e}, "
                         f"ATE {ate_dev:.1e} (<= 1e-6). Published KITTI abs_rel 0.111 and sequence 09 ATE "
                         "(0.011 +- 0.006) need full-dataset multi-GPU training: not desk-reproducible")
