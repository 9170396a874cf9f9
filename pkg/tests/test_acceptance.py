"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are collected in RESULTS and repeated in the terminal summary (see
conftest.py), so ``pytest tests/test_acceptance.py`` shows them without ``-s``.
The reconstruction and training benchmarks are marked ``slow``.
"""

import hashlib
import math
import time

import numpy as np
import pytest

import oracles
from stormsplat import autograd as ag
from stormsplat import metrics
from stormsplat.cli import main as cli_main
from stormsplat.gaussians import GaussianGroup, GaussianSequence
from stormsplat.model import (
    ModelConfig, init_params, mambagru_block, predict, sequence_loss, train,
)
from stormsplat.reconstruct import ReconConfig, compute_flows, reconstruct, rendered_sequence
from stormsplat.renderer import RenderContext, RenderPlane, render_plane, volume_slice
from stormsplat.volume import Blob, SynthSpec, synth_sequence

RESULTS: dict[int, str] = {}


def record(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    RESULTS[n] = line
    assert passed, line


def grad_rel_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Largest |a - f| / max(|a|, |f|, floor), floor = 1e-6 of the largest gradient entry."""
    a, f = np.ravel(analytic), np.ravel(fd)
    floor = 1e-6 * max(np.max(np.abs(a)), np.max(np.abs(f)), 1e-300)
    return float(np.max(np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)))


def random_plane(rng, max_side: int, half_width=math.inf) -> RenderPlane:
    basis, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rows, cols = rng.integers(1, max_side + 1, 2)
    spacing = rng.uniform(0.5, 1.5)
    origin = np.array([4.0, 4.0, 4.0]) - 0.5 * spacing * (cols * basis[:, 0] + rows * basis[:, 1])
    return RenderPlane(tuple(origin), tuple(basis[:, 0]), tuple(basis[:, 1]), int(rows), int(cols),
                       spacing, half_width)


def random_scene(rng, M: int) -> GaussianGroup:
    return GaussianGroup(rng.uniform(1, 7, (M, 3)), rng.normal(0.5, 1.0, (M, 2)), rng.normal(0.0, 0.3, (M, 3)),
                         rng.normal(size=(M, 4)), nonneg=[True, False])


# ------------------------------------------------------------------ 1


def test_c01_renderer_gradients():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for _ in range(50):
        g = random_scene(rng, int(rng.integers(1, 9)))
        plane = random_plane(rng, 8)
        up = rng.normal(size=(plane.rows, plane.cols, 2))

        def loss(gg):
            return float(np.sum(render_plane(gg, plane).image * up))

        ctx = RenderContext(g, [plane])
        ctx.forward()
        grads = ctx.backward([up])
        for key in ("positions", "features", "scales", "quats"):
            base = getattr(g, key)
            fd = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                gp, gm = g.copy(), g.copy()
                getattr(gp, key)[idx] += h
                getattr(gm, key)[idx] -= h
                fd[idx] = (loss(gp) - loss(gm)) / (2 * h)
            worst = max(worst, grad_rel_error(getattr(grads, key), fd))
    elapsed = time.perf_counter() - t0
    record(1, worst <= 1e-4 and elapsed < 60,
           f"renderer gradients, 50 scenes: max rel err {worst:.2e} (tol 1e-4), {elapsed:.1f}s (limit 60s)")


# ------------------------------------------------------------------ 2


def test_c02_renderer_matches_oracle():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(100):
        g = random_scene(rng, int(rng.integers(1, 21)))
        if k % 2:
            plane = random_plane(rng, 40)
        else:
            # finite slab: keep every Gaussian inside the cull bound
            plane = random_plane(rng, 40, half_width=rng.uniform(0.5, 2.0))
            n = plane.normal
            o = np.asarray(plane.origin)
            depth = (g.positions - o) @ n
            g.positions -= np.outer(depth - np.clip(depth, -plane.half_width, plane.half_width), n)
        got = render_plane(g, plane).image
        ref = oracles.render_plane(g, plane)
        scale = max(np.max(np.abs(ref)), 1e-300)
        worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-6 and elapsed < 60,
           f"tiled/culled render vs per-pixel oracle, 100 scenes: max err {worst:.2e} of peak (tol 1e-6), "
           f"{elapsed:.1f}s (limit 60s)")


# ------------------------------------------------------------------ 3


def _layer(rng, d, e, s):
    lp = {k: rng.normal(0, 0.4, (d, d)) for k in ("W_cr", "W_hr", "W_cz", "W_hz", "W_ch", "W_hh")}
    lp.update({k: rng.normal(0, 0.4, d) for k in ("b_r", "b_z", "b_h")})
    lp.update(W_in=rng.normal(0, 0.4, (d, e)), W_gate=rng.normal(0, 0.4, (d, e)),
              W_delta=rng.normal(0, 0.4, (e, e)), b_delta=rng.normal(-1, 0.3, e),
              W_B=rng.normal(0, 0.4, (e, s)), W_C=rng.normal(0, 0.4, (e, s)),
              a_raw=rng.normal(0, 1, (e, s)), D=rng.normal(1, 0.2, e), W_out=rng.normal(0, 0.4, (e, d)))
    return lp


def test_c03_mambagru_equations():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(20):
        d, e, s, L = int(rng.integers(2, 9)), int(rng.integers(2, 13)), int(rng.integers(1, 6)), int(rng.integers(1, 13))
        lp = _layer(rng, d, e, s)
        c, hprev = rng.normal(size=(L, d)), rng.normal(size=(L, d))
        c_hat, h_new = mambagru_block(ag.Tensor(c), ag.Tensor(hprev), {k: ag.Tensor(v) for k, v in lp.items()})
        ref_c, ref_h = oracles.mambagru(c.tolist(), hprev.tolist(), lp)
        worst = max(worst, float(np.max(np.abs(c_hat.data - ref_c))), float(np.max(np.abs(h_new.data - ref_h))))
    lp = _layer(rng, 8, 16, 4)
    lp["b_z"] = np.full(8, 30.0)
    c, hprev = rng.normal(size=(16, 8)), rng.normal(size=(16, 8))
    _, h_new = mambagru_block(ag.Tensor(c), ag.Tensor(hprev), {k: ag.Tensor(v) for k, v in lp.items()})
    gap = float(np.linalg.norm(h_new.data - hprev))
    record(3, worst <= 1e-10 and gap < 1e-6,
           f"block vs scalar transcription: max diff {worst:.2e} (tol 1e-10); "
           f"||H_t - H_t-1|| at b_z=30: {gap:.2e} (tol 1e-6)")


# ------------------------------------------------------------------ 4


def test_c04_model_gradients():
    from test_model import random_sequence

    rng = np.random.default_rng(404)
    cfg = ModelConfig(d_model=8, layers=1, d_state=4, t_in=2, t_out=2, n_tokens=16, seed=4)
    params = init_params(cfg)
    # move off the initialisation so no block sits at an exact zero
    for p in params.values():
        p.data = p.data + rng.normal(0, 0.05, p.data.shape)
    seq = random_sequence(rng, cfg.horizon, M=16)
    t0 = time.perf_counter()
    ag.backward(sequence_loss(params, cfg, seq))
    h = 1e-5
    worst, count = 0.0, 0
    for name, p in params.items():
        fd = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            base = p.data[idx]
            p.data[idx] = base + h
            up = float(sequence_loss(params, cfg, seq).data)
            p.data[idx] = base - h
            down = float(sequence_loss(params, cfg, seq).data)
            p.data[idx] = base
            fd[idx] = (up - down) / (2 * h)
        worst = max(worst, grad_rel_error(p.grad, fd))
        count += p.data.size
    elapsed = time.perf_counter() - t0
    record(4, worst <= 1e-3 and elapsed < 120,
           f"model gradients, all {count} weights: max rel err {worst:.2e} (tol 1e-3), {elapsed:.1f}s (limit 120s)")


# ------------------------------------------------------------------ 5 and 6

DESK_DIMS = (16, 32, 32)
DESK_BUDGET = dict(n_gaussians=512, iters_backward=350, iters_forward_position=400, iters_forward_full=1200)


def desk_scene():
    blobs = [Blob(center=(8, 12, 8), sigma=(4, 3, 2.5), amplitude=50, velocity=(2, 0.5, 0)),
             Blob(center=(24, 20, 7), sigma=(3, 3, 2), amplitude=4, velocity=(-1.5, 0.5, 0.0), growth=0.45)]
    return synth_sequence(SynthSpec(blobs=blobs, floor=0.5, seed=1), 8, DESK_DIMS)[0]


def sequence_mae(gseq, vols) -> float:
    return float(np.mean([metrics.me_mae(r, v)[1] for r, v in zip(rendered_sequence(gseq), vols.frames)]))


def slice_psnr(gseq, vols) -> float:
    peak = max(float(v.data.max()) for v in vols.frames)
    out = []
    for r, v in zip(rendered_sequence(gseq), vols.frames):
        for axis, n in zip("zyx", vols.dims):
            for k in range(n):
                out.append(metrics.psnr(volume_slice(r.data, axis, k), volume_slice(v.data, axis, k), peak))
    return float(np.mean(out))


@pytest.fixture(scope="module")
def desk_runs():
    seq = desk_scene()
    t0 = time.perf_counter()
    base = ReconConfig.desk(**DESK_BUDGET)
    flows = compute_flows(seq, base)
    runs = {}
    for name, over in (("full", {}), ("no-flow", {"lambda_local": 0.0}), ("no-energy", {"lambda_global": 0.0}),
                       ("no-backward", {"skip_backward": True})):
        runs[name] = reconstruct(seq, ReconConfig.desk(**DESK_BUDGET, **over), flows=flows).sequence
    return seq, runs, time.perf_counter() - t0


@pytest.mark.slow
def test_c05_desk_reconstruction(desk_runs):
    seq, runs, elapsed = desk_runs
    mae = {k: sequence_mae(v, seq) for k, v in runs.items()}
    psnr = slice_psnr(runs["full"], seq)
    beats = all(mae["full"] < mae[k] for k in ("no-flow", "no-energy", "no-backward"))
    detail = ", ".join(f"{k} {v:.4f}" for k, v in mae.items())
    record(5, psnr >= 35 and beats and elapsed < 900,
           f"desk benchmark: PSNR {psnr:.2f} dB (min 35); MAE {detail}; {elapsed:.0f}s (limit 900s)")


@pytest.mark.slow
def test_c06_tracking_fidelity():
    velocity = np.array([1.5, 0.5, 0.0])
    sigma = np.array([4.0, 3.0, 2.5])
    blob = Blob(center=(10, 14, 8), sigma=tuple(sigma), amplitude=50, velocity=tuple(velocity))
    seq = synth_sequence(SynthSpec(blobs=[blob], floor=0.5, seed=1), 8, DESK_DIMS)[0]
    cfg = ReconConfig.desk(**DESK_BUDGET)
    frames = reconstruct(seq, cfg, flows=compute_flows(seq, cfg)).sequence.frames()
    errs = []
    for t in range(len(frames) - 1):
        inside = np.sum(((frames[t].positions - blob.center_at(t)) / sigma) ** 2, axis=1) < 1.0
        step = frames[t + 1].positions[inside] - frames[t].positions[inside]
        errs.append(float(np.mean(np.linalg.norm(step - velocity, axis=1))))
    err = float(np.mean(errs))
    record(6, err < 0.5, f"tracked displacement error {err:.3f} voxel/frame (limit 0.5), per frame "
                         f"{np.round(errs, 3).tolist()}")


# ------------------------------------------------------------------ 7 and 8

PRED_DIMS = (12, 24, 24)
# frame 0 gets 30% of the forward budget so the later frames start from a settled fit
PRED_RECON = dict(n_gaussians=256, iters_backward=270, iters_forward_position=300, iters_forward_full=900,
                  warmup_share=0.3)
PRED_MODEL = dict(d_model=32, layers=2, d_state=8, t_in=5, t_out=5, epochs=200, lr=6e-3, std_floor=0.1, seed=0)


def prediction_volumes(s: int):
    rng = np.random.default_rng(100 + s)
    blobs = []
    for _ in range(int(rng.integers(1, 3))):
        blobs.append(Blob(center=tuple(rng.uniform([6, 6, 4], [18, 18, 8])),
                          sigma=tuple(rng.uniform([2.5, 2.5, 1.8], [4, 4, 2.5])),
                          amplitude=float(rng.uniform(30, 50)),
                          velocity=tuple(rng.uniform([-1, -1, -0.2], [1, 1, 0.2])),
                          growth=float(rng.uniform(-0.03, 0.05))))
    return synth_sequence(SynthSpec(blobs=blobs, floor=0.5, seed=s), 10, PRED_DIMS)[0]


def rollout_mae(params, cfg, data, **kw) -> np.ndarray:
    out = []
    for vols, gseq, _ in data:
        p = predict([gseq.frame(t) for t in range(cfg.t_in)], params, cfg, **kw)
        p = GaussianSequence(p.anchor, p.deltas, gseq.dims, gseq.channel_names)
        rendered = rendered_sequence(p)[1:]
        out.append(np.mean([metrics.me_mae(r, v)[1] for r, v in zip(rendered, vols.frames[cfg.t_in:])]))
    return np.array(out)


@pytest.fixture(scope="module")
def prediction_data():
    t0 = time.perf_counter()
    data = []
    for s in range(8):
        vols = prediction_volumes(s)
        cfg = ReconConfig.desk(**PRED_RECON, seed=s)
        gseq = reconstruct(vols, cfg, flows=compute_flows(vols, cfg)).sequence
        floor = np.mean([metrics.me_mae(r, v)[1] for r, v in zip(rendered_sequence(gseq), vols.frames)][5:])
        data.append((vols, gseq, floor))
    return data, time.perf_counter() - t0


@pytest.fixture(scope="module")
def trained_models(prediction_data):
    data, _ = prediction_data
    seqs = [g for _, g, _ in data]
    models = {}
    for name, over in (("full", {}), ("no-memory", {"use_memory": False}), ("unsorted", {"sort_tokens": False})):
        cfg = ModelConfig(n_features=seqs[0].anchor.n_features, **PRED_MODEL, **over)
        t0 = time.perf_counter()
        res = train(seqs, cfg)
        models[name] = (cfg, res, time.perf_counter() - t0)
    return models


@pytest.mark.slow
def test_c07_prediction_overfit(prediction_data, trained_models):
    data, recon_time = prediction_data
    cfg, res, train_time = trained_models["full"]
    first, last = res.history[0]["loss"], res.history[-1]["loss"]
    drop = 1.0 - last / first
    mae = rollout_mae(res.params, cfg, data)
    floor = np.array([f for _, _, f in data])
    # the held-in sequence scored is the first one; the rest are reported for context
    ratio = float(mae[0] / floor[0])
    elapsed = recon_time + train_time
    record(7, drop >= 0.9 and ratio < 2.0 and elapsed < 1200,
           f"training loss {first:.3f} -> {last:.4f} ({100 * drop:.1f}% drop, min 90%); held-in rollout MAE "
           f"{mae[0]:.4f} = {ratio:.2f}x reconstruction floor {floor[0]:.4f} (limit 2x; all sequences "
           f"{np.round(mae / floor, 2).tolist()}); {elapsed:.0f}s (limit 1200s)")


@pytest.mark.slow
def test_c08_memory_and_sort_ablations(prediction_data, trained_models):
    data, _ = prediction_data
    mae = {k: float(np.mean(rollout_mae(res.params, cfg, data))) for k, (cfg, res, _) in trained_models.items()}
    ok = mae["no-memory"] > mae["full"] and mae["unsorted"] > mae["full"]
    record(8, ok, "mean rollout MAE over the 8 sequences: " + ", ".join(f"{k} {v:.4f}" for k, v in mae.items()))


# ------------------------------------------------------------------ 9


def test_c09_metrics_oracles():
    from test_metrics import csi_pattern

    rng = np.random.default_rng(909)
    worst = 0.0
    for _ in range(10):
        shape = tuple(int(n) for n in rng.integers(1, 9, 3))
        t = rng.uniform(0, 60, shape)
        p = np.clip(t + rng.normal(0, 8, shape), 0, None)
        dr = float(t.max() - t.min()) or 1.0
        me, mae = metrics.me_mae(p, t)
        rme, rmae = oracles.me_mae(p, t)
        diffs = [abs(me - rme), abs(mae - rmae),
                 abs(metrics.psnr(p, t, dr) - oracles.psnr(p, t, dr)),
                 abs(metrics.ssim(p, t, dr) - oracles.ssim(p, t, dr))]
        diffs += [abs(metrics.csi_pooled(p, t, thr) - oracles.csi(p, t, thr)) for thr in (20, 30, 40)]
        worst = max(worst, max(diffs))
    pred, truth = csi_pattern()
    pattern = metrics.csi_pooled(pred, truth, 20)
    record(9, worst <= 1e-10 and pattern == 0.5,
           f"ME/MAE/PSNR/SSIM/CSI vs scalar oracles: max diff {worst:.2e} (tol 1e-10); hand pattern CSI {pattern}")


# ------------------------------------------------------------------ 10


def _sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_c10_determinism(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text('{"blobs": [{"center": [6, 5, 4], "sigma": [2, 2, 1.5], "amplitude": 40, '
                    '"velocity": [0.8, 0.3, 0]}], "seed": 5}')
    digests = []
    for run in ("a", "b"):
        root = tmp_path / run
        steps = [
            ["synth", "--spec", spec, "--out", root / "data", "--frames", 4, "--dims", 8, 12, 12],
            ["reconstruct", "--input", root / "data", "--out", root / "seq.gseq", "--n-gaussians", 64,
             "--iters-backward", 30, "--iters-forward-position", 40, "--iters-forward-full", 80, "--seed", 3],
            ["train", "--data", root / "seq.gseq", "--out", root / "model.bin", "--d-model", 8, "--layers", 1,
             "--d-state", 4, "--t-in", 2, "--t-out", 2, "--epochs", 5, "--seed", 3],
            ["predict", "--model", root / "model.bin", "--obs", root / "seq.gseq", "--out", root / "pred.gseq"],
            ["render", "--gseq", root / "pred.gseq", "--out", root / "pred", "--skip", 1],
            ["eval", "--pred", root / "pred", "--truth", root / "data", "--truth-start", 2,
             "--report", root / "report.json"],
        ]
        for argv in steps:
            assert cli_main([str(a) for a in argv]) == 0, argv[0]
        digests.append({n: _sha(root / n) for n in ("seq.gseq", "model.bin", "pred.gseq", "report.json")})
    same = digests[0] == digests[1]
    record(10, same, "reruns give identical .gseq, checkpoint, prediction and report bytes" if same
           else f"reruns differ: {digests}")
