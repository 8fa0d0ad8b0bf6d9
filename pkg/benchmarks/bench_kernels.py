"""Numba vs numpy timings for the hot kernels and one training step.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 8]

Kernel timings call the ``*_nb`` and ``*_np`` variants directly. The
training-step timing runs this script again in a child process with
LNDET_DISABLE_NUMBA=1, since the switch is read at import time.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from lndet import _accel, kernels
from lndet.detmini.assign import Grid, atss_assign
from lndet.detmini.model import DetectorConfig, backward, init_params


def best_of(fn, repeat):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 16, 48, 48))
    cols = kernels.im2col_np(x, 3, 2, 1)
    dcols = rng.normal(size=cols.shape)
    feat = rng.normal(size=(batch, 32, 24, 24))
    px = rng.uniform(-1, 24, size=(batch, 24 * 24 * 9))
    py = rng.uniform(-1, 24, size=(batch, 24 * 24 * 9))
    gout = rng.normal(size=(batch, px.shape[1], 32))
    return {
        "im2col": (lambda: kernels.im2col_nb(x, 3, 2, 1), lambda: kernels.im2col_np(x, 3, 2, 1)),
        "col2im": (lambda: kernels.col2im_nb(dcols, x.shape, 3, 2, 1),
                   lambda: kernels.col2im_np(dcols, x.shape, 3, 2, 1)),
        "bilinear_gather": (lambda: kernels.bilinear_gather_nb(feat, px, py),
                            lambda: kernels.bilinear_gather_np(feat, px, py)),
        "bilinear_backward": (lambda: kernels.bilinear_backward_nb(feat, px, py, gout),
                              lambda: kernels.bilinear_backward_np(feat, px, py, gout)),
    }


def train_step_time(batch, repeat):
    cfg = DetectorConfig(anchor_scale=3.0)
    mp = init_params(cfg, 0)
    rng = np.random.default_rng(1)
    x = rng.random((batch, 3, 96, 96))
    grid = Grid.for_image(96, 96, 4)
    t = [atss_assign([(30, 30, 40, 42)], grid, 3.0) for _ in range(batch)]
    return best_of(lambda: backward(mp, x, t, cfg), repeat)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--step-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args.step_only:
        print(json.dumps({"numba": _accel.USE_NUMBA, "step_s": train_step_time(args.batch, args.repeat)}))
        return

    if not _accel.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    print(f"{'kernel':<20}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, (f_nb, f_np) in kernel_cases(args.batch).items():
        t_nb, t_np = best_of(f_nb, args.repeat), best_of(f_np, args.repeat)
        print(f"{name:<20}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")

    steps = {}
    for flag in ("0", "1"):
        env = dict(os.environ, LNDET_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--step-only", "--repeat", str(max(3, args.repeat // 3)),
                              "--batch", str(args.batch)], env=env, capture_output=True, text=True, check=True)
        steps[flag] = json.loads(out.stdout.strip().splitlines()[-1])["step_s"]
    print(f"{'train step 96x96':<20}{steps['0'] * 1e3:>10.2f}{steps['1'] * 1e3:>10.2f}"
          f"{steps['1'] / steps['0']:>8.1f}x  (batch {args.batch}, forward + backward)")


if __name__ == "__main__":
    main()
