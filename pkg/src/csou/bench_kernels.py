"""Timing comparison of the numba and numpy kernel backends.

Run as ``python -m csou.bench_kernels``.  Each hot kernel is timed on
workload-shaped inputs under both implementations, agreement is checked,
and a full network forward+backward step is timed at the end.  Numba
compile time is excluded by a warmup pass.
"""

import argparse
import time

import numpy as np

from . import backend


def _time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel_cases(batch, rng):
    L, n, k, c = 16, 33, 3, 3
    x = rng.standard_normal((batch, L, n, n)).astype(np.float32)
    w = rng.standard_normal((L, L, k, k)).astype(np.float32)
    wd = rng.standard_normal((batch, L, L, k, k)).astype(np.float32)
    b = rng.standard_normal((L,)).astype(np.float32)
    gy = rng.standard_normal((batch, L, n, n)).astype(np.float32)
    xb = rng.standard_normal((batch, 1, n, n)).astype(np.float32)
    yb = rng.standard_normal((batch, 1, n // c, n // c)).astype(np.float32)
    t = np.float32(0.37)
    return [
        ("conv2d shared", lambda: backend.conv2d_fwd(x, w, b, pad=1)),
        ("conv2d per-sample", lambda: backend.conv2d_fwd(x, wd, b, pad=1)),
        ("conv2d grad_w", lambda: backend.conv2d_grad_w(x, gy, k, k, 1)),
        ("conv2d grad_w/sample", lambda: backend.conv2d_grad_w(x, gy, k, k, 1, True)),
        ("conv2d grad_x", lambda: backend.conv2d_grad_x(w, gy, 1)),
        ("block_mean", lambda: backend.block_mean(xb, c)),
        ("block_replicate", lambda: backend.block_replicate(yb, c)),
        ("block_sum_within", lambda: backend.block_sum_within(xb, c)),
        ("soft_threshold", lambda: backend.soft_threshold(x, t)),
    ]


def _net_step(batch, rng):
    """One training-shaped forward+backward through the full network."""
    from . import autodiff as ad
    from .network import NetConfig, init_params, named_params, net_forward

    cfg = NetConfig()
    params = init_params(cfg, seed=0)
    m = cfg.scene.m1
    y = rng.uniform(0.0, 300.0, size=(batch, m, m)).astype(np.float32)
    gt = ad.Tensor(rng.uniform(0.0, 1.0, size=(batch, 1, m * 3, m * 3)).astype(np.float32))

    def step():
        out = net_forward(params, y)
        loss = ad.tmean(ad.mul(ad.sub(out, gt), ad.sub(out, gt)))
        loss.backward()
        for _, p in named_params(params):
            p.zero_grad()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--warmup", type=int, default=2)
    ap.add_argument("--skip-net", action="store_true", help="kernels only")
    args = ap.parse_args(argv)

    names = backend.available_backends()
    print("backends: %s (active: %s)" % (", ".join(names), backend.get_backend()))
    if "numba" not in names:
        print("numba unavailable; timing numpy only")

    rng = np.random.default_rng(0)
    cases = _kernel_cases(args.batch, rng)
    results = {}
    for bk in names:
        backend.set_backend(bk)
        results[bk] = [(_time(fn, args.reps, args.warmup), fn()) for _, fn in cases]

    header = "%-22s" % "kernel"
    for bk in names:
        header += "%12s" % (bk + " ms")
    if len(names) == 2:
        header += "%10s%12s" % ("speedup", "max|diff|")
    print(header)
    for i, (label, _) in enumerate(cases):
        row = "%-22s" % label
        for bk in names:
            row += "%12.3f" % (results[bk][i][0] * 1e3)
        if len(names) == 2:
            a, b = results[names[0]][i][1], results[names[1]][i][1]
            ratio = results["numpy"][i][0] / results["numba"][i][0]
            row += "%10.2fx%12.2e" % (ratio, float(np.max(np.abs(a - b))))
        print(row)

    if not args.skip_net:
        print()
        for bk in names:
            backend.set_backend(bk)
            dt = _time(_net_step(args.batch, np.random.default_rng(1)), max(2, args.reps // 2), 1)
            print("net fwd+bwd (batch %d) %-6s %8.1f ms" % (args.batch, bk, dt * 1e3))

    backend.set_backend("auto")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
