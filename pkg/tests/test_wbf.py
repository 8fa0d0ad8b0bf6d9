import itertools

import numpy as np
import pytest

from lndet.errors import ConfigError, DataError
from lndet.volcore import Detection, save_detections
from lndet.wbf import WbfConfig, fuse_detections, fuse_slice, fuse_study
from oracles import ref_wbf


def _random_dets(rng, n, z=0):
    out = []
    centers = rng.uniform(10, 50, size=(3, 2))
    for _ in range(n):
        c = centers[rng.integers(3)] + rng.normal(0, 2, 2)
        w, h = rng.uniform(4, 10, 2)
        out.append(Detection(z, (c[0] - w / 2, c[1] - h / 2, c[0] + w / 2, c[1] + h / 2),
                             float(rng.uniform(0.05, 1.0))))
    return out


def test_single_detection_unchanged():
    d = Detection(3, (1, 2, 5, 6), 0.7)
    out = fuse_slice([d], WbfConfig(), num_sources=1)
    assert len(out) == 1 and out[0].box == d.box and out[0].score == d.score


def test_two_identical_boxes():
    dets = [Detection(0, (1, 1, 4, 4), 0.8), Detection(0, (1, 1, 4, 4), 0.6)]
    out = fuse_slice(dets, WbfConfig(), num_sources=2)
    assert len(out) == 1
    assert out[0].box == pytest.approx((1, 1, 4, 4))
    assert out[0].score == pytest.approx(0.7)


def test_one_of_t_downweighted():
    out = fuse_slice([Detection(0, (1, 1, 4, 4), 0.9)], WbfConfig(), num_sources=3)
    assert out[0].score == pytest.approx(0.3)


def test_matches_bruteforce_50(rng):
    for t in (1, 3):
        dets = _random_dets(rng, 50)
        got = fuse_slice(dets, WbfConfig(), num_sources=t)
        want = ref_wbf([(d.slice, d.box, d.score) for d in dets], 0.55, t)
        assert len(got) == len(want)
        for g, (box, score) in zip(got, want):
            np.testing.assert_allclose(g.box, box, rtol=0, atol=1e-9)
            assert abs(g.score - score) <= 1e-9


def test_mixed_slices_rejected():
    with pytest.raises(DataError):
        fuse_slice([Detection(0, (0, 0, 1, 1), 0.5), Detection(1, (0, 0, 1, 1), 0.5)], WbfConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        WbfConfig(iou_thr=1.0)
    with pytest.raises(ConfigError):
        WbfConfig(num_sources=0)


def test_properties(rng):
    for _ in range(30):
        dets = _random_dets(rng, 20)
        for d in fuse_slice(dets, WbfConfig(), num_sources=2):
            assert 0 <= d.score <= 1
            lo = np.min([e.box for e in dets], axis=0)
            hi = np.max([e.box for e in dets], axis=0)
            assert np.all(np.array(d.box) >= lo[[0, 1, 0, 1]].min() - 1e-9)
            assert np.all(np.array(d.box) <= hi[[2, 3, 2, 3]].max() + 1e-9)


def test_fuse_study_one_source(tmp_path, rng):
    dets = _random_dets(rng, 6, z=2)
    save_detections(tmp_path / "a.json", "s", "m", dets)
    sid, fused, sources = fuse_study([tmp_path / "a.json"], WbfConfig())
    assert sid == "s" and sources == ["m"]
    want = fuse_slice(dets, WbfConfig(), num_sources=1)
    assert [(d.box, d.score) for d in fused] == [(d.box, d.score) for d in want]


def test_fuse_study_identical_files(tmp_path):
    dets = [Detection(0, (0, 0, 4, 4), 0.9), Detection(1, (10, 10, 14, 14), 0.3)]
    paths = []
    for k in range(3):
        save_detections(tmp_path / f"{k}.json", "s", f"ck{k}", dets)
        paths.append(tmp_path / f"{k}.json")
    _, fused, _ = fuse_study(paths, WbfConfig())
    assert sorted(d.score for d in fused) == pytest.approx([0.3, 0.9])


def test_fuse_study_order_invariant(tmp_path, rng):
    paths = []
    for k in range(3):
        dets = _random_dets(rng, 8, z=0) + _random_dets(rng, 5, z=1)
        save_detections(tmp_path / f"{k}.json", "s", f"ck{k}", dets)
        paths.append(tmp_path / f"{k}.json")
    ref = fuse_study(paths, WbfConfig())[1]
    for perm in itertools.permutations(paths):
        got = fuse_study(list(perm), WbfConfig())[1]
        assert [(d.slice, d.box, d.score) for d in got] == [(d.slice, d.box, d.score) for d in ref]


def test_fuse_study_mismatch(tmp_path):
    save_detections(tmp_path / "a.json", "s1", "m", [])
    save_detections(tmp_path / "b.json", "s2", "m", [])
    with pytest.raises(DataError):
        fuse_study([tmp_path / "a.json", tmp_path / "b.json"], WbfConfig())


def test_fuse_detections_per_slice(rng):
    a = _random_dets(rng, 5, 0) + _random_dets(rng, 5, 1)
    out = fuse_detections([a, a], WbfConfig())
    assert {d.slice for d in out} == {0, 1}
