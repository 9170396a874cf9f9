"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each row reports the best of N wall-clock runs per backend (after one warm-up
call, so numba compilation is excluded) and the largest absolute difference
between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from stormsplat.constraints import FlowConfig, flow_2d
from stormsplat.gaussians import GaussianGroup
from stormsplat.kernels import scan as SK
from stormsplat.renderer import RenderContext, all_axis_slices, axis_slice


def best_of(fn, repeat: int):
    out = fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _flat(out):
    if isinstance(out, np.ndarray):
        return [out]
    return [a for item in out for a in _flat(item)]


def max_diff(a, b) -> float:
    return max(float(np.max(np.abs(x - y))) if x.size else 0.0 for x, y in zip(_flat(a), _flat(b)))


def scene(rng, M: int, dims):
    D, H, W = dims
    pos = rng.uniform(0, 1, (M, 3)) * np.array([W, H, D])
    quats = rng.normal(size=(M, 4))
    return GaussianGroup(pos, rng.normal(1, 0.5, (M, 1)), np.log(rng.uniform(0.7, 2.0, (M, 3))), quats)


def cases(quick: bool):
    rng = np.random.default_rng(0)
    dims = (8, 16, 16) if quick else (16, 32, 32)
    M = 128 if quick else 512
    g = scene(rng, M, dims)
    planes = [axis_slice(a, k, dims) for a, k in all_axis_slices(dims)]
    ups = None

    def render_fwd(nb):
        return lambda: RenderContext(g, planes, use_numba=nb).forward()

    def render_bwd(nb):
        nonlocal ups
        ctx = RenderContext(g, planes, use_numba=nb)
        imgs = ctx.forward()
        if ups is None:
            ups = [rng.normal(size=im.shape) for im in imgs]

        def run():
            gr = ctx.backward(ups)
            return [gr.positions, gr.features, gr.scales, gr.quats]
        return run

    n = 32 if quick else 64
    yy, xx = np.mgrid[0:n, 0:n]
    a = 50 * np.exp(-((xx - n / 2) ** 2 + (yy - n / 2) ** 2) / 40.0)
    b = 50 * np.exp(-((xx - n / 2 - 1.5) ** 2 + (yy - n / 2 - 0.5) ** 2) / 40.0)

    def flow(nb):
        return lambda: flow_2d(a, b, FlowConfig(), use_numba=nb)

    L, E, S = (64, 32, 8) if quick else (256, 128, 16)
    args = (rng.normal(size=(L, E)), rng.uniform(0.01, 0.5, (L, E)), -rng.uniform(0.5, 4, (E, S)),
            rng.normal(size=(L, S)), rng.normal(size=(L, S)), rng.normal(size=E))
    _, h = SK.scan_forward_np(*args)
    gy = rng.normal(size=(L, E))

    def scan_fwd(nb):
        fn = SK.scan_forward_nb if nb else SK.scan_forward_np
        return lambda: fn(*args)

    def scan_bwd(nb):
        fn = SK.scan_backward_nb if nb else SK.scan_backward_np
        return lambda: fn(*args, h, gy)

    return [
        (f"render forward  M={M} {len(planes)} planes", render_fwd),
        (f"render backward M={M} {len(planes)} planes", render_bwd),
        (f"horn-schunck    {n}x{n}", flow),
        (f"scan forward    L={L} E={E} S={S}", scan_fwd),
        (f"scan backward   L={L} E={E} S={S}", scan_bwd),
    ]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small problem sizes")
    args = ap.parse_args(argv)
    print(f"{'kernel':<40} {'numba s':>10} {'numpy s':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, make in cases(args.quick):
        t_nb, out_nb = best_of(make(True), args.repeat)
        t_np, out_np = best_of(make(False), args.repeat)
        print(f"{name:<40} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f} {max_diff(out_nb, out_np):11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
