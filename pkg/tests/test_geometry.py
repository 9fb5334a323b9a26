import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from packdepth.geometry import (CameraIntrinsics, PixelGrid, RigidTransform, axis_angle_to_matrix,
                                backproject, bilinear_sample, compose, invert, matrix_to_axis_angle,
                                pixel_grid, pose_vec_to_transform, project, scale_intrinsics, warp)

D = torch.float64


def random_transform(rng, batch=None):
    shape = () if batch is None else (batch,)
    aa = torch.from_numpy(rng.normal(size=shape + (3,)))
    aa = aa / aa.norm(dim=-1, keepdim=True) * torch.from_numpy(rng.uniform(0.01, 3.0, size=shape + (1,)))
    t = torch.from_numpy(rng.normal(size=shape + (3,)))
    return RigidTransform(axis_angle_to_matrix(aa), t)


def assert_transform_close(a, b, tol):
    assert torch.allclose(a.rotation, b.rotation, atol=tol, rtol=0)
    assert torch.allclose(a.translation, b.translation, atol=tol, rtol=0)


def rot_z(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return torch.tensor([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=D)


# -- intrinsics -------------------------------------------------------------------------

def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 4, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 1, -0.5, 4, 4)


def test_scale_intrinsics():
    k = CameraIntrinsics(100, 80, 50, 40, 200, 160)
    assert scale_intrinsics(k, 1, 1) == k
    half = scale_intrinsics(k, 0.5, 0.5)
    assert (half.fx, half.cx, half.fy, half.cy) == (50, 25, 40, 20)
    assert (half.width, half.height) == (100, 80)
    with pytest.raises(ValueError):
        scale_intrinsics(k, 0, 1)
    with pytest.raises(ValueError):
        scale_intrinsics(k, 1, -2)


def test_half_resolution_round_trip_matches_full_resolution():
    rng = np.random.default_rng(3)
    k = CameraIntrinsics(120.0, 110.0, 63.0, 47.0, 128, 96)
    kh = scale_intrinsics(k, 0.5, 0.5)
    depth_h = torch.from_numpy(rng.uniform(1, 10, size=(1, 48, 64)))
    pose = RigidTransform(axis_angle_to_matrix(torch.tensor([[0.01, -0.02, 0.005]], dtype=D)),
                          torch.tensor([[0.1, 0.0, 0.2]], dtype=D))
    grid_h = project(backproject(depth_h, kh), pose, kh)
    # the same 3D points seen through the full-resolution camera
    pts = backproject(depth_h, kh)
    grid_f = project(pts, pose, k, width=128, height=96)
    assert torch.allclose(grid_h.coords * 2, grid_f.coords, atol=1e-4)


# -- SE(3) ------------------------------------------------------------------------------

def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    ident = RigidTransform.identity(dtype=D)
    assert_transform_close(compose(t, ident), t, 1e-12)
    assert_transform_close(compose(t, invert(t)), ident, 1e-6)


def test_compose_two_quarter_turns():
    a = RigidTransform(rot_z(90), torch.zeros(3, dtype=D))
    r = compose(a, a).rotation
    expected = torch.tensor([[-1, 0, 0], [0, -1, 0], [0, 0, 1]], dtype=D)
    assert torch.allclose(r, expected, atol=1e-12)


def test_compose_applies_right_operand_first():
    a = RigidTransform(rot_z(90), torch.zeros(3, dtype=D))
    b = RigidTransform(torch.eye(3, dtype=D), torch.tensor([1.0, 0, 0], dtype=D))
    p = torch.zeros(3, dtype=D)
    # translate to (1,0,0), then rotate 90 deg about z -> (0,1,0)
    assert torch.allclose(compose(a, b).apply(p), torch.tensor([0.0, 1.0, 0.0], dtype=D))


def test_invert_simple_cases():
    ident = RigidTransform.identity(dtype=D)
    assert_transform_close(invert(ident), ident, 0)
    t = RigidTransform(torch.eye(3, dtype=D), torch.tensor([1.0, 2.0, 3.0], dtype=D))
    assert torch.equal(invert(t).translation, torch.tensor([-1.0, -2.0, -3.0], dtype=D))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_transform(rng) for _ in range(3))
    assert_transform_close(compose(compose(a, b), c), compose(a, compose(b, c)), 1e-6)
    assert_transform_close(invert(invert(a)), a, 1e-9)
    assert compose(a, b).is_valid(1e-6)


def test_rodrigues_quarter_turn_and_zero():
    r = axis_angle_to_matrix(torch.tensor([0.0, 0.0, math.pi / 2], dtype=D))
    assert torch.allclose(r, rot_z(90), atol=1e-12)
    assert torch.equal(axis_angle_to_matrix(torch.zeros(3, dtype=D)), torch.eye(3, dtype=D))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_axis_angle_round_trip(seed):
    rng = np.random.default_rng(seed)
    aa = torch.from_numpy(rng.normal(size=3))
    aa = aa / aa.norm() * rng.uniform(1e-3, 3.0)
    assert torch.allclose(matrix_to_axis_angle(axis_angle_to_matrix(aa)), aa, atol=1e-8)


def test_pose_vec_translation_passthrough():
    vec = torch.tensor([0.3, -0.2, 0.1, 1.0, -2.0, 0.5], dtype=D)
    t = pose_vec_to_transform(vec)
    assert torch.equal(t.translation, vec[3:])
    assert t.is_valid()


# -- projection -------------------------------------------------------------------------

def test_backproject_optical_axis_and_unit_intrinsics():
    k = CameraIntrinsics(50, 50, 2, 1, 5, 3)
    depth = torch.full((1, 3, 5), 7.0, dtype=D)
    pts = backproject(depth, k)
    assert torch.allclose(pts[0, 1, 2], torch.tensor([0.0, 0.0, 7.0], dtype=D))
    k1 = CameraIntrinsics(1, 1, 0, 0, 5, 5)
    pts = backproject(torch.ones(1, 5, 5, dtype=D), k1)
    assert torch.allclose(pts[0, 3, 2], torch.tensor([2.0, 3.0, 1.0], dtype=D))


def test_backproject_rejects_non_positive_depth():
    k = CameraIntrinsics(1, 1, 0, 0, 2, 2)
    with pytest.raises(ValueError):
        backproject(torch.tensor([[[1.0, 0.0], [1.0, 1.0]]]), k)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_project_backproject_round_trip(seed):
    rng = np.random.default_rng(seed)
    w, h = 12, 9
    k = CameraIntrinsics(rng.uniform(5, 50), rng.uniform(5, 50), rng.uniform(0, w - 1),
                         rng.uniform(0, h - 1), w, h)
    depth = torch.from_numpy(rng.uniform(0.5, 30, size=(2, h, w)))
    grid = project(backproject(depth, k), None, k)
    expected = pixel_grid(h, w, D)[..., :2]
    assert torch.allclose(grid.coords, expected.expand_as(grid.coords), atol=1e-5, rtol=0)
    assert bool(grid.valid.all())


def test_project_marks_points_behind_camera():
    k = CameraIntrinsics(10, 10, 2, 2, 5, 5)
    depth = torch.full((1, 5, 5), 2.0, dtype=D)
    depth[0, 2, 2] = 0.5
    pose = RigidTransform(torch.eye(3, dtype=D)[None], torch.tensor([[0.0, 0.0, -1.0]], dtype=D))
    grid = project(backproject(depth, k), pose, k)
    assert not grid.valid[0, 2, 2]
    assert torch.isfinite(grid.coords).all()


def test_project_lateral_shift_matches_pinhole_formula():
    fx, d = 40.0, 5.0
    k = CameraIntrinsics(fx, fx, 8, 6, 16, 12)
    depth = torch.full((1, 12, 16), d, dtype=D)
    tx = 0.5 * d / fx
    pose = RigidTransform(torch.eye(3, dtype=D)[None], torch.tensor([[tx, 0.0, 0.0]], dtype=D))
    grid = project(backproject(depth, k), pose, k)
    base = pixel_grid(12, 16, D)[..., :2]
    shift = grid.coords[0] - base
    # a point moved by +tx lands fx * tx / d pixels to the right
    assert torch.allclose(shift[..., 0], torch.full((12, 16), fx * tx / d, dtype=D), atol=1e-12)
    assert torch.allclose(shift[..., 1], torch.zeros(12, 16, dtype=D), atol=1e-12)
    assert not grid.valid[0, :, -1].any()


# -- sampling ---------------------------------------------------------------------------

def identity_grid(b, h, w):
    coords = pixel_grid(h, w, D)[..., :2].expand(b, h, w, 2).clone()
    return PixelGrid(coords, torch.ones(b, h, w, dtype=torch.bool))


def test_bilinear_identity_grid_is_exact():
    img = torch.rand(2, 3, 7, 9, dtype=D)
    assert torch.equal(bilinear_sample(img, identity_grid(2, 7, 9)), img)


def test_bilinear_half_pixel_on_ramp():
    slope = 0.3
    ramp = (torch.arange(10, dtype=D) * slope).expand(1, 1, 4, 10).clone()
    grid = identity_grid(1, 4, 10)
    grid.coords[..., 0] += 0.5
    grid.valid = grid.coords[..., 0] <= 9
    out = bilinear_sample(ramp, grid)
    assert torch.allclose(out[..., :-1], ramp[..., :-1] + slope / 2, atol=1e-12)
    assert torch.all(out[..., -1] == 0)


def test_bilinear_gradients_match_finite_differences():
    torch.manual_seed(0)
    img = torch.rand(1, 2, 5, 6, dtype=D, requires_grad=True)
    coords = (pixel_grid(5, 6, D)[..., :2] * 0.7 + 0.6 + 0.05 * torch.rand(5, 6, 2, dtype=D))[None]
    coords.requires_grad_(True)
    valid = torch.ones(1, 5, 6, dtype=torch.bool)
    fn = lambda im, c: bilinear_sample(im, PixelGrid(c, valid))  # noqa: E731
    assert torch.autograd.gradcheck(fn, (img, coords), eps=1e-6, atol=1e-8, rtol=1e-4)


# -- warp -------------------------------------------------------------------------------

def test_warp_identity_reproduces_source():
    k = CameraIntrinsics(20, 20, 7.5, 5.5, 16, 12)
    src = torch.rand(1, 3, 12, 16, dtype=D)
    depth = torch.rand(1, 1, 12, 16, dtype=D) + 1
    synth, mask = warp(src, depth, RigidTransform.identity((1,), dtype=D), k)
    assert bool(mask.all())
    assert torch.allclose(synth, src, atol=1e-6)


def test_warp_plane_translation_matches_shifted_source():
    fx, d = 30.0, 4.0
    k = CameraIntrinsics(fx, fx, 15.5, 7.5, 32, 16)
    x = torch.arange(32, dtype=D)
    src = (0.5 + 0.4 * torch.sin(0.4 * x)).expand(1, 3, 16, 32).clone()
    shift = 1.5
    tx = shift * d / fx
    pose = RigidTransform(torch.eye(3, dtype=D)[None], torch.tensor([[tx, 0.0, 0.0]], dtype=D))
    synth, mask = warp(src, torch.full((1, 1, 16, 32), d, dtype=D), pose, k)
    expected = 0.5 + 0.4 * torch.sin(0.4 * (x + shift))
    m = mask[0, 0, 0]
    # bilinear interpolation error on a sinusoid: at most (step^2 / 8) * max|f''|
    bound = 0.4 * 0.4 ** 2 / 8 + 1e-12
    assert (synth[0, 0, 0][m] - expected[m]).abs().max() <= bound
    assert int(m.sum()) == 32 - 2  # u + 1.5 <= 31


def test_warp_coverage_under_large_translation():
    fx, d, w, h = 50.0, 10.0, 64, 32
    k = CameraIntrinsics(fx, fx, (w - 1) / 2, (h - 1) / 2, w, h)
    depth = torch.full((1, 1, h, w), d, dtype=D)
    src = torch.rand(1, 3, h, w, dtype=D)
    for shift_px in (5.0, 20.5, 40.0, 70.0):
        tx = shift_px * d / fx
        pose = RigidTransform(torch.eye(3, dtype=D)[None], torch.tensor([[tx, 0.0, 0.0]], dtype=D))
        _, mask = warp(src, depth, pose, k)
        # pixels u with u + shift <= w - 1 survive
        expected = max(0, int(np.floor(w - 1 - shift_px)) + 1) / w
        assert abs(float(mask.double().mean()) - expected) <= 0.01


def test_warp_gradients_match_finite_differences():
    torch.manual_seed(1)
    k = torch.tensor([[[12.0, 0, 7.5], [0, 12.0, 7.5], [0, 0, 1]]], dtype=D)
    src = torch.rand(1, 2, 16, 16, dtype=D, requires_grad=True)
    depth = (2 + torch.rand(1, 1, 16, 16, dtype=D)).requires_grad_(True)
    vec = torch.tensor([[0.01, -0.02, 0.015, 0.05, -0.03, 0.02]], dtype=D, requires_grad=True)

    def fn(s, dep, v):
        out, mask = warp(s, dep, pose_vec_to_transform(v), k)
        return out

    assert torch.autograd.gradcheck(fn, (src, depth, vec), eps=1e-6, atol=1e-7, rtol=1e-3)


def _bilinear_oracle(img, u, v):
    # pure-Python bilinear with zero padding
    h, w = len(img), len(img[0])

    def at(y, x):
        return img[y][x] if 0 <= x < w and 0 <= y < h else 0.0

    x0, y0 = math.floor(u), math.floor(v)
    a, b = u - x0, v - y0
    return ((1 - a) * (1 - b) * at(y0, x0) + a * (1 - b) * at(y0, x0 + 1)
            + (1 - a) * b * at(y0 + 1, x0) + a * b * at(y0 + 1, x0 + 1))


def test_bilinear_matches_scalar_oracle():
    rng = np.random.default_rng(11)
    img = rng.random((6, 8))
    n = 200
    coords = torch.from_numpy(np.stack([rng.uniform(-0.5, 7.5, n), rng.uniform(-0.5, 5.5, n)], -1))
    grid = PixelGrid(coords.view(1, 1, n, 2), torch.ones(1, 1, n, dtype=torch.bool))
    out = bilinear_sample(torch.from_numpy(img)[None, None], grid)[0, 0, 0]
    expected = [_bilinear_oracle(img.tolist(), float(u), float(v)) for u, v in coords]
    assert np.allclose(out.numpy(), expected, atol=1e-12)


def test_bilinear_matches_grid_sample():
    torch.manual_seed(4)
    img = torch.rand(2, 3, 9, 11, dtype=D)
    coords = torch.rand(2, 5, 7, 2, dtype=D) * torch.tensor([12.0, 10.0], dtype=D) - 0.5
    valid = torch.ones(2, 5, 7, dtype=torch.bool)
    norm = torch.stack([2 * coords[..., 0] / 10 - 1, 2 * coords[..., 1] / 8 - 1], -1)
    ref = torch.nn.functional.grid_sample(img, norm, mode="bilinear", padding_mode="zeros",
                                          align_corners=True)
    assert torch.allclose(bilinear_sample(img, PixelGrid(coords, valid)), ref, atol=1e-10)


def test_resize_intrinsics_half_pixel_convention():
    from packdepth.geometry import resize_intrinsics
    k = CameraIntrinsics(100, 80, 49.5, 39.5, 100, 80)
    half = resize_intrinsics(k, 50, 40)
    # a centered principal point stays centered
    assert (half.cx, half.cy, half.fx, half.fy) == (24.5, 19.5, 50, 40)
    assert resize_intrinsics(k, 100, 80) == k
