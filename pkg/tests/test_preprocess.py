import numpy as np
import pytest

from lndet.errors import ConfigError, RangeError
from lndet.phantom import PhantomConfig, generate_study
from lndet.preprocess import (PreprocessConfig, histogram_equalize, percentile_normalize, preprocess_study)
from lndet.volcore import Volume
from oracles import ref_percentile


def test_constant_volume_maps_to_zero():
    out = percentile_normalize(Volume(np.full((3, 3, 2), 7.0)), PreprocessConfig())
    np.testing.assert_array_equal(out.data, 0.0)


def test_full_range_is_affine():
    v = Volume(np.arange(100, dtype=np.float32).reshape(10, 10, 1))
    out = percentile_normalize(v, PreprocessConfig(p_low=0, p_high=100))
    np.testing.assert_allclose(out.data, v.data / 99.0, atol=1e-7)
    assert out.data.min() == 0.0 and out.data.max() == 1.0


def test_percentiles_match_sort_oracle(rng):
    data = rng.normal(size=(10, 10, 10)).astype(np.float32)
    out = percentile_normalize(Volume(data), PreprocessConfig(p_low=1, p_high=99))
    vals = data.astype(np.float64).ravel().tolist()
    lo, hi = ref_percentile(vals, 1), ref_percentile(vals, 99)
    want = np.clip((np.clip(data, lo, hi) - lo) / (hi - lo), 0, 1)
    np.testing.assert_allclose(out.data, want, atol=1e-6)


def test_hist_eq_uniform_is_near_identity():
    nb = 16
    data = ((np.arange(nb * 8) % nb) + 0.5) / nb
    v = Volume(data.reshape(nb, 8, 1).astype(np.float32))
    out = histogram_equalize(v, PreprocessConfig(hist_eq_bins=nb))
    assert np.max(np.abs(out.data - v.data)) <= 1.0 / nb


def test_hist_eq_two_levels():
    data = np.full(100, 0.1)
    data[:10] = 0.9
    out = histogram_equalize(Volume(data.reshape(10, 10, 1)), PreprocessConfig())
    flat = out.data.ravel()
    assert flat[50] == pytest.approx(0.9, abs=1e-6)
    assert flat[0] == pytest.approx(1.0, abs=1e-6)


def test_hist_eq_monotone(rng):
    data = rng.uniform(size=(8, 8, 4)).astype(np.float32)
    out = histogram_equalize(Volume(data), PreprocessConfig(hist_eq_bins=32)).data.ravel()
    order = np.argsort(data.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_hist_eq_range_error():
    with pytest.raises(RangeError):
        histogram_equalize(Volume(np.full((2, 2, 1), 1.5)), PreprocessConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        PreprocessConfig(p_low=50, p_high=10)
    with pytest.raises(ConfigError):
        PreprocessConfig(hist_eq_bins=1)


def test_study_range_annotations_idempotence():
    cfg = PreprocessConfig()
    study = generate_study(PhantomConfig(), 1, "train")
    once = preprocess_study(study, cfg)
    assert once.annotations == study.annotations
    for v in once.series:
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0
    twice = preprocess_study(once, cfg)
    for a, b in zip(once.series, twice.series):
        rms = float(np.sqrt(np.mean((a.data.astype(np.float64) - b.data) ** 2)))
        assert rms < 1e-3
