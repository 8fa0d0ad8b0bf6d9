"""Acceptance criteria 1-8, one pass/fail line each.

The lines are printed in the pytest terminal summary (see conftest.py) and
also when this file is run directly: ``python tests/test_acceptance.py``.
The desk-scale criteria (5, 6, 8) train nine models and take several minutes.
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from lndet import config as C
from lndet.cli import cmd_experiment
from lndet.detmini.assign import Grid, atss_assign
from lndet.evalkit import FP_THRESHOLDS, average_precision, froc, match_detections
from lndet.phantom import generate_study
from lndet.sampler import Sample25D, compose_25d, compose_partner, ill_mix
from lndet.volcore import Detection
from lndet.wbf import WbfConfig, fuse_slice

import gradcheck
from oracles import ref_ap, ref_atss, ref_froc, ref_match, ref_wbf
from test_evalkit import as_objects, random_volume

RESULTS = {}
NAMES = {
    1: "gradient correctness vs finite differences",
    2: "mixing exactness (endpoints, symmetry, convexity, labels)",
    3: "oracle equivalence (matching, FROC, AP, ATSS, WBF)",
    4: "metric sanity anchors",
    5: "desk-scale E_21+ILL S@4 >= 0.80 over 3 seeds",
    6: "non-inferiority: ILL vs NSA and E_21 vs E_D",
    7: "predict one volume < 3 s single-threaded",
    8: "byte-identical report.csv on rerun",
}
SEEDS = (0, 1, 2)
DESK_PRESETS = ("e21-ill", "e21-nsa", "ed")
S4 = FP_THRESHOLDS.index(4.0)


def record(num, ok, detail):
    RESULTS[num] = (bool(ok), detail)
    return ok


def summary_lines():
    out = []
    for num in sorted(RESULTS):
        ok, detail = RESULTS[num]
        out.append(f"[{'PASS' if ok else 'FAIL'}] {num}. {NAMES[num]}: {detail}")
    return out


# ---------------------------------------------------------------- 1


def test_c1_gradients():
    t0 = time.perf_counter()
    counts = {"vfl": 40, "giou": 40, "network": 25}
    total = failed = 0
    worst = None
    for k, (kind, n) in enumerate(counts.items()):
        done, bad, w = gradcheck.run_cases(kind, n, seed=100 + k)
        total += done
        failed += bad
        worst = worst or w
    elapsed = time.perf_counter() - t0
    ok = failed == 0 and total >= 100 and elapsed < 60
    record(1, ok, f"{total - failed}/{total} cases within rel 1e-3 (abs floor 1e-8), {elapsed:.1f} s")
    assert ok, worst


# ---------------------------------------------------------------- 2


def _mix_pairs(rng, n, study):
    nz = study.dims[2]
    for i in range(n):
        if i % 4 == 0:
            z = int(rng.integers(nz))
            mode = ("E_12", "E_21")[i % 8 // 4]
            yield compose_25d(study, z, mode), compose_partner(study, z, mode)
        else:
            shape = (3, int(rng.integers(4, 20)), int(rng.integers(4, 20)))
            boxes = ((1.0, 1.0, 3.0, 3.5),) if rng.random() < 0.5 else ()
            scale = 10.0 ** rng.uniform(-2, 2)
            a = Sample25D(rng.normal(0, scale, shape), 2, ("T2FS",) * 3, boxes, "s")
            b = Sample25D(rng.normal(0, scale, shape), 2, ("DWI",) * 3, boxes, "s")
            yield a, b


def test_c2_ill_exactness(small_phantom):
    rng = np.random.default_rng(2)
    study = generate_study(small_phantom, 5, "train")
    n = worst = 0
    failures = []
    for a, b in _mix_pairs(rng, 1000, study):
        lam = float(rng.choice([rng.random(), 0.0, 1.0, 0.5]))
        av, bv = a.channels.astype(np.float64), b.channels.astype(np.float64)
        tol = 1e-6 * max(1.0, np.abs(av).max(), np.abs(bv).max())
        m = ill_mix(a, b, lam).channels.astype(np.float64)
        errs = {
            "endpoint1": np.abs(ill_mix(a, b, 1.0).channels - av).max(),
            "endpoint0": np.abs(ill_mix(a, b, 0.0).channels - bv).max(),
            "symmetry": np.abs(m - ill_mix(b, a, 1.0 - lam).channels).max(),
            "convexity": max(0.0, (np.minimum(av, bv) - m).max(), (m - np.maximum(av, bv)).max()),
        }
        worst = max(worst, max(errs.values()) / tol)
        if any(v > tol for v in errs.values()):
            failures.append(errs)
        if ill_mix(a, b, lam).boxes != a.boxes or repr(ill_mix(a, b, lam).boxes) != repr(a.boxes):
            failures.append("labels")
        n += 1
    ok = not failures and n >= 1000
    record(2, ok, f"{n - len(failures)}/{n} samples, worst error {worst:.2g} x tolerance (1e-6 relative to magnitude)")
    assert ok, failures[:3]


# ---------------------------------------------------------------- 3


def _check_atss(rng):
    g = Grid(int(rng.integers(4, 25)), int(rng.integers(4, 25)), 4)
    scale = float(rng.choice([1.0, 3.0, 8.0]))
    gts = []
    for _ in range(int(rng.integers(0, 11))):
        x0, y0 = rng.uniform(0, g.gx * 4 - 4), rng.uniform(0, g.gy * 4 - 4)
        gts.append((x0, y0, x0 + rng.uniform(1, 24), y0 + rng.uniform(1, 24)))
    topk = int(rng.integers(1, 12))
    t = atss_assign(gts, g, scale, topk)
    ref = ref_atss(gts, g.gx, g.gy, 4, scale, topk)
    if set(np.flatnonzero(t.positive.ravel()).tolist()) != set(ref):
        return False
    for k, (gi, q, box) in ref.items():
        i, j = divmod(k, g.gy)
        if t.gt_index[i, j] != gi or abs(t.q[i, j] - q) > 1e-9 or np.max(np.abs(t.box[i, j] - box)) > 1e-9:
            return False
    return True


def _check_wbf(rng):
    n = int(rng.integers(1, 11))
    dets = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, 12, 2)
        w, h = rng.uniform(2, 8, 2)
        score = float(rng.choice([0.5, 0.7])) if rng.random() < 0.2 else float(rng.uniform(0, 1))
        dets.append(Detection(0, (x0, y0, x0 + w, y0 + h), score))
    t = int(rng.integers(1, 4))
    thr = float(rng.choice([0.3, 0.55]))
    got = fuse_slice(dets, WbfConfig(iou_thr=thr), num_sources=t)
    want = ref_wbf([(d.slice, d.box, d.score) for d in dets], thr, t)
    if len(got) != len(want):
        return False
    return all(np.max(np.abs(np.array(g.box) - box)) <= 1e-9 and abs(g.score - s) <= 1e-9
               for g, (box, s) in zip(got, want))


def _check_metrics(rng):
    vols = []
    while not any(g for _, g in vols):
        vols = [random_volume(rng, max_dets=10, max_gts=10) for _ in range(int(rng.integers(1, 4)))]
    ms = [match_detections(*as_objects(d, g)) for d, g in vols]
    match_ok = all(m.tp.tolist() == ref_match(d, g)[0] and m.gt_hit.tolist() == ref_match(d, g)[1]
                   for m, (d, g) in zip(ms, vols))
    points, at = froc(ms)
    rp, rat = ref_froc(vols, FP_THRESHOLDS)
    froc_ok = len(points) == len(rp) and all(abs(a - b) <= 1e-9 for p, q in zip(points, rp) for a, b in zip(p, q))
    froc_ok = froc_ok and all(abs(a - b) <= 1e-9 for a, b in zip(at, rat))
    ap_ok = abs(average_precision(ms) - ref_ap(vols)) <= 1e-9
    return match_ok, froc_ok, ap_ok


def test_c3_oracles():
    rng = np.random.default_rng(3)
    n = 200
    passed = {"matching": 0, "FROC": 0, "AP": 0, "ATSS": 0, "WBF": 0}
    for _ in range(n):
        m, f, a = _check_metrics(rng)
        passed["matching"] += m
        passed["FROC"] += f
        passed["AP"] += a
        passed["ATSS"] += _check_atss(rng)
        passed["WBF"] += _check_wbf(rng)
    ok = all(v == n for v in passed.values())
    record(3, ok, ", ".join(f"{k} {v}/{n}" for k, v in passed.items()))
    assert ok, passed


# ---------------------------------------------------------------- 4


def test_c4_metric_anchors():
    gts = [(z, (2.0, 2.0, 8.0, 8.0)) for z in range(5)]
    m = match_detections([Detection(z, b, 0.9) for z, b in gts], gts)
    _, at = froc([m])
    fp = int((~m.tp).sum())
    g = (0, (0.0, 0.0, 4.0, 4.0))
    m2 = match_detections([Detection(0, g[1], 0.6), Detection(0, (10.0, 10.0, 14.0, 14.0), 0.9)], [g])
    ap = average_precision([m2])
    ok = at == [1.0] * 6 and fp == 0 and ap == pytest.approx(0.5, abs=1e-12)
    record(4, ok, f"perfect input S@{list(FP_THRESHOLDS)} = {at}, FP {fp}; single GT/FP AP = {ap:.6f}")
    assert ok


# ---------------------------------------------------------------- 5, 6, 7, 8


def desk_config(name, seed):
    return C.preset(name, seed=seed, n_runs=1)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    out = {}
    for name in DESK_PRESETS:
        for seed in SEEDS:
            t0 = time.perf_counter()
            rep = cmd_experiment(desk_config(name, seed), root / f"{name}_s{seed}")
            out[name, seed] = (rep, time.perf_counter() - t0)
    return root, out


@pytest.mark.slow
def test_c5_desk_sensitivity(desk_runs):
    _, runs = desk_runs
    s4 = [runs["e21-ill", s][0].sens_at_fp[S4] for s in SEEDS]
    elapsed = sum(runs["e21-ill", s][1] for s in SEEDS)
    mean = float(np.mean(s4))
    ok = mean >= 0.80 and elapsed <= 1800
    record(5, ok, f"mean S@4 {mean:.3f} (seeds {', '.join(f'{v:.3f}' for v in s4)}), target 0.80; "
                  f"runtime {elapsed / 60:.1f} min (limit 30)")
    assert ok


@pytest.mark.slow
def test_c6_non_inferiority(desk_runs):
    _, runs = desk_runs
    mean = {n: float(np.mean([runs[n, s][0].sens_at_fp[S4] for s in SEEDS])) for n in DESK_PRESETS}
    ill_ok = mean["e21-ill"] >= mean["e21-nsa"] - 0.02
    mode_ok = mean["e21-nsa"] >= mean["ed"] - 0.02
    record(6, ill_ok and mode_ok,
           f"S@4 E_21+ILL {mean['e21-ill']:.3f} vs E_21 {mean['e21-nsa']:.3f} ({'ok' if ill_ok else 'fail'}); "
           f"E_21 {mean['e21-nsa']:.3f} vs E_D {mean['ed']:.3f} ({'ok' if mode_ok else 'fail'}); margin 0.02")
    assert ill_ok and mode_ok


def _single_thread_env():
    env = dict(os.environ)
    for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        env[k] = "1"
    return env


@pytest.mark.slow
def test_c7_predict_throughput(desk_runs, tmp_path):
    root, _ = desk_runs
    cfg = desk_config("e21-ill", 0)
    study_dir = tmp_path / "one"
    generate_study(cfg.phantom, 10_000, "test", study_dir)
    ck = root / "e21-ill_s0" / "runs" / "run0" / "ck0"
    cmd = [sys.executable, "-m", "lndet", "predict", "--preset", "e21-ill", "--checkpoint", str(ck),
           "--data", str(study_dir), "--out", str(tmp_path / "dets")]
    subprocess.run(cmd, env=_single_thread_env(), check=True, capture_output=True)  # warm numba cache
    t0 = time.perf_counter()
    r = subprocess.run(cmd, env=_single_thread_env(), capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    ok = r.returncode == 0 and elapsed < 3.0 and any((tmp_path / "dets").rglob("detections.json"))
    record(7, ok, f"{elapsed:.2f} s wall for the whole CLI process (96x96x16, 1 thread), limit 3 s")
    assert ok, r.stderr


@pytest.mark.slow
def test_c8_reproducible_report(desk_runs, tmp_path):
    root, _ = desk_runs
    cmd = [sys.executable, "-m", "lndet", "experiment", "--preset", "e21-ill", "--seed", "0",
           "--set", "n_runs=1", "--out", str(tmp_path / "rerun")]
    r = subprocess.run(cmd, capture_output=True, text=True)
    a = (root / "e21-ill_s0" / "report.csv").read_bytes()
    b = (tmp_path / "rerun" / "report.csv").read_bytes() if r.returncode == 0 else b""
    ok = r.returncode == 0 and a == b
    record(8, ok, f"report.csv {'identical' if ok else 'differs'} ({len(a)} bytes) between an in-process "
                  f"run and a CLI rerun of e21-ill seed 0")
    assert ok, r.stderr


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"] + sys.argv[1:]))
