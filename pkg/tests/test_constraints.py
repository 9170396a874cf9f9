import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stormsplat.constraints import (
    FlowConfig,
    FlowGrid,
    TargetDistribution,
    density_target,
    flow_2d,
    fuse_flow,
    global_loss,
    local_loss,
    pseudo3d_flow,
    smooth,
    target_distribution,
)
from stormsplat.gaussians import GaussianGroup
from stormsplat.renderer import render_density
from stormsplat.volume import Blob, SynthSpec, synth_sequence

FAST = FlowConfig(iterations=60)


def blob_pair(velocity, dims=(12, 32, 32), center=(14.0, 15.0, 6.0), sigma=(3.0, 2.5, 2.0)):
    spec = SynthSpec([Blob(center=center, sigma=sigma, amplitude=40, velocity=velocity)])
    seq, flows = synth_sequence(spec, 2, dims)
    return seq, flows


# ------------------------------------------------------------------ 2-D flow


@pytest.mark.parametrize("use_numba", [True, False])
def test_identical_images_zero_flow(use_numba):
    seq, _ = blob_pair((0, 0, 0))
    img = seq[0].primary[6]
    f = flow_2d(img, img, FAST, use_numba=use_numba)
    assert np.max(np.abs(f)) < 1e-3


def test_constant_image_exactly_zero():
    img = np.full((16, 20), 7.0)
    assert np.all(flow_2d(img, img, FAST) == 0)
    assert np.all(flow_2d(img, np.full((16, 20), 9.0), FAST) == 0)


def test_translation_recovered():
    seq, _ = blob_pair((2, 0, 0))
    f = flow_2d(seq[0].primary[6], seq[1].primary[6], FlowConfig())
    inner = f[8:24, 8:24]
    mask = seq[0].primary[6][8:24, 8:24] > 1.0
    med = np.median(inner[mask], axis=0)
    assert abs(med[0] - 2.0) < 0.25 and abs(med[1]) < 0.25


def test_flow_backends_agree():
    seq, _ = blob_pair((1.5, -1, 0))
    a, b = seq[0].primary[6], seq[1].primary[6]
    np.testing.assert_allclose(flow_2d(a, b, FAST, use_numba=True), flow_2d(a, b, FAST, use_numba=False),
                               atol=1e-9)


def test_flow_deterministic():
    seq, _ = blob_pair((1, 1, 0))
    a, b = seq[0].primary[5], seq[1].primary[5]
    assert flow_2d(a, b, FAST).tobytes() == flow_2d(a, b, FAST).tobytes()


# ------------------------------------------------------------------ fusion


def test_fuse_examples():
    D, H, W = 3, 4, 5
    zero = fuse_flow(np.zeros((D, H, W, 2)), np.zeros((H, D, W, 2)), np.zeros((W, D, H, 2)))
    assert np.all(zero.data == 0)
    xy = np.zeros((D, H, W, 2))
    xy[..., 0] = 2
    xz = np.zeros((H, D, W, 2))
    xz[..., 0] = 2
    f = fuse_flow(xy, xz, np.zeros((W, D, H, 2)))
    assert np.all(f.data[..., 0] == 2) and np.all(f.data[..., 1:] == 0)
    xz[..., 0] = 4
    assert np.all(fuse_flow(xy, xz, np.zeros((W, D, H, 2))).data[..., 0] == 3)


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_flow(np.zeros((3, 4, 5, 2)), np.zeros((4, 3, 6, 2)), np.zeros((5, 3, 4, 2)))


def test_fuse_routes_components():
    rng = np.random.default_rng(0)
    D, H, W = 2, 3, 4
    xy, xz, yz = rng.normal(size=(D, H, W, 2)), rng.normal(size=(H, D, W, 2)), rng.normal(size=(W, D, H, 2))
    f = fuse_flow(xy, xz, yz).data
    for d in range(D):
        for h in range(H):
            for w in range(W):
                assert f[d, h, w, 0] == pytest.approx(0.5 * (xy[d, h, w, 0] + xz[h, d, w, 0]))
                assert f[d, h, w, 1] == pytest.approx(0.5 * (xy[d, h, w, 1] + yz[w, d, h, 0]))
                assert f[d, h, w, 2] == pytest.approx(0.5 * (xz[h, d, w, 1] + yz[w, d, h, 1]))


def test_rigid_translation_fused():
    seq, _ = blob_pair((2, 0, 0), dims=(16, 32, 32), center=(13.0, 16.0, 8.0), sigma=(3.5, 3.0, 2.5))
    f = pseudo3d_flow(seq[0], seq[1])
    inside = seq[0].primary > 0.2 * seq[0].primary.max()
    err = np.abs(f.data[inside] - np.array([2.0, 0.0, 0.0]))
    assert err.mean(axis=0).max() < 0.3


def test_flow_grid_volume_round_trip():
    rng = np.random.default_rng(1)
    fg = FlowGrid(rng.normal(size=(2, 3, 4, 3)).astype(np.float32))
    back = FlowGrid.from_volume(fg.to_volume(5))
    assert np.array_equal(back.data, fg.data)


# ------------------------------------------------------------------ local loss


def test_local_loss_zero_when_matching():
    rng = np.random.default_rng(2)
    flow = FlowGrid(rng.normal(size=(4, 5, 6, 3)))
    prev = rng.uniform(0, 4, (10, 3))
    cur = prev + flow.lookup(prev)
    val, grad = local_loss(prev, cur, flow)
    assert val < 1e-28 and np.max(np.abs(grad)) < 1e-14


def test_local_loss_closed_form():
    flow = FlowGrid(np.zeros((2, 2, 2, 3)))
    val, grad = local_loss(np.array([[0.5, 0.5, 0.5]]), np.array([[1.5, 0.5, 0.5]]), flow)
    assert val == 1.0
    np.testing.assert_array_equal(grad, [[2.0, 0.0, 0.0]])


def test_local_loss_matches_loop():
    rng = np.random.default_rng(3)
    D, H, W = 4, 5, 6
    data = rng.normal(size=(D, H, W, 3))
    prev = rng.uniform(-1, 7, (25, 3))
    cur = prev + rng.normal(size=(25, 3))
    val, grad = local_loss(prev, cur, FlowGrid(data))
    tot = 0.0
    g = np.zeros_like(cur)
    for i in range(25):
        w = min(max(int(math.floor(prev[i, 0])), 0), W - 1)
        h = min(max(int(math.floor(prev[i, 1])), 0), H - 1)
        d = min(max(int(math.floor(prev[i, 2])), 0), D - 1)
        for k in range(3):
            r = cur[i, k] - prev[i, k] - data[d, h, w, k]
            tot += r * r
            g[i, k] = 2 * r / 25
    assert val == pytest.approx(tot / 25, abs=1e-12)
    np.testing.assert_allclose(grad, g, atol=1e-12)


@given(st.integers(0, 10_000))
def test_local_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    flow = FlowGrid(rng.normal(size=(3, 3, 3, 3)))
    prev = rng.uniform(0, 3, (6, 3))
    val, _ = local_loss(prev, prev + rng.normal(size=(6, 3)), flow)
    assert val >= 0


def test_trilinear_lookup_at_centers_equals_nearest():
    rng = np.random.default_rng(4)
    flow = FlowGrid(rng.normal(size=(3, 4, 5, 3)))
    centers = np.array([[w + 0.5, h + 0.5, d + 0.5] for d in range(3) for h in range(4) for w in range(5)])
    np.testing.assert_allclose(flow.lookup(centers, trilinear=True), flow.lookup(centers), atol=1e-12)


# ------------------------------------------------------------------ target distribution


def test_target_examples():
    assert np.all(target_distribution(np.zeros((4, 5, 6)), tau=1.0).values == 0)
    np.testing.assert_allclose(target_distribution(np.full((4, 5, 6), 2.0), tau=3.0).values, 2.0, atol=1e-12)
    np.testing.assert_allclose(target_distribution(np.full((4, 5, 6), 5.0), tau=3.0).values, 3.0)


@given(st.integers(0, 10_000), st.floats(0.5, 3.0))
def test_blur_preserves_mass(seed, sigma):
    rng = np.random.default_rng(seed)
    v = rng.uniform(0, 10, (6, 7, 8))
    assert smooth(v, sigma).sum() == pytest.approx(v.sum(), rel=1e-9)


def test_target_clamped_range():
    seq, _ = blob_pair((0, 0, 0))
    p = target_distribution(seq[0])
    assert p.values.min() >= 0 and p.values.max() <= p.tau


def test_density_target_mass():
    seq, _ = blob_pair((0, 0, 0))
    p = density_target(seq[0], 100, tau_fraction=1e9)
    assert p.values.sum() == pytest.approx(100 * (2 * math.pi) ** 1.5, rel=1e-9)


# ------------------------------------------------------------------ global loss


def _group(pos, s=0.0):
    pos = np.atleast_2d(np.asarray(pos, float))
    M = len(pos)
    return GaussianGroup(pos, np.ones((M, 1)), np.full((M, 3), s), np.tile([1.0, 0, 0, 0], (M, 1)))


def test_global_loss_zero_at_target():
    g = _group([[3.2, 2.7, 2.1], [1.4, 3.3, 2.6]])
    dims = (5, 6, 6)
    p = TargetDistribution(render_density(g, dims, 0.7), 0.7)
    val, grads = global_loss(g, p)
    assert val == 0.0 and np.all(grads.positions == 0)


def test_global_loss_empty_equivalent():
    rng = np.random.default_rng(5)
    P = rng.uniform(0, 1, (3, 4, 5))
    far = _group([[1e4, 1e4, 1e4]])
    val, _ = global_loss(far, TargetDistribution(P, 1.0))
    assert val == pytest.approx(np.sum(P ** 2) / P.size, rel=1e-12)


def test_global_loss_gradient_fd():
    rng = np.random.default_rng(6)
    g = GaussianGroup(rng.uniform(1, 4, (4, 3)), np.ones((4, 1)), rng.normal(0, 0.2, (4, 3)),
                      rng.normal(size=(4, 4)))
    P = rng.uniform(0, 0.6, (5, 5, 5))
    p = TargetDistribution(P, 5.0)
    _, grads = global_loss(g, p, cutoff=math.inf)
    h = 1e-6
    for key in ("positions", "scales", "quats"):
        for idx in np.ndindex(getattr(g, key).shape):
            gp, gm = g.copy(), g.copy()
            getattr(gp, key)[idx] += h
            getattr(gm, key)[idx] -= h
            fd = (global_loss(gp, p, math.inf)[0] - global_loss(gm, p, math.inf)[0]) / (2 * h)
            a = getattr(grads, key)[idx]
            assert abs(a - fd) <= 1e-4 * max(abs(fd), 1e-6), (key, idx, a, fd)


def test_global_loss_translation_sensitive():
    seq, _ = synth_sequence(SynthSpec([Blob(center=(8, 8, 4), sigma=(2, 2, 2))]), 2, (8, 16, 16))
    p = density_target(seq[0], 1)
    losses = [global_loss(_group([[8 + k, 8, 4]]), p)[0] for k in range(6)]
    assert all(b > a for a, b in zip(losses, losses[1:]))
