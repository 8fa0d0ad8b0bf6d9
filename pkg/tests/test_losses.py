import math

import numpy as np
import pytest

from lndet.detmini.losses import box_loss, giou_loss, varifocal_loss, varifocal_loss_logits
from gradcheck import run_cases


def test_vfl_perfect_positive():
    loss, _ = varifocal_loss(1.0 - 1e-9, 1.0)
    assert loss < 1e-6


def test_vfl_negative_closed_form():
    loss, _ = varifocal_loss(0.5, 0.0, 0.75, 2.0)
    assert loss == pytest.approx(0.75 * 0.25 * math.log(2), rel=1e-12)
    assert loss == pytest.approx(0.1300, abs=5e-5)


def test_vfl_nonnegative(rng):
    p = rng.uniform(0, 1, 500)
    q = np.where(rng.random(500) < 0.5, 0.0, rng.uniform(0, 1, 500))
    loss, _ = varifocal_loss(p, q)
    assert np.all(loss >= 0)


def test_vfl_grid_derivative():
    eps = 1e-7
    ps = np.linspace(0.05, 0.95, 10)
    qs = np.r_[0.0, np.linspace(0.1, 1.0, 9)]
    for p in ps:
        for q in qs:
            _, g = varifocal_loss(p, q)
            n = (varifocal_loss(p + eps, q)[0] - varifocal_loss(p - eps, q)[0]) / (2 * eps)
            assert abs(g - n) <= 1e-5 * max(abs(g), abs(n), 1e-3)


def test_vfl_logit_form_agrees(rng):
    z = rng.normal(0, 2, 200)
    q = np.where(rng.random(200) < 0.5, 0.0, rng.uniform(0, 1, 200))
    p = 1 / (1 + np.exp(-z))
    lz, gz = varifocal_loss_logits(z, q)
    lp, gp = varifocal_loss(p, q)
    np.testing.assert_allclose(lz, lp, rtol=1e-6, atol=1e-12)
    np.testing.assert_allclose(gz, gp * p * (1 - p), rtol=1e-6, atol=1e-12)


def test_vfl_extreme_logits_finite():
    loss, g = varifocal_loss_logits(np.array([-800.0, 800.0]), np.array([1.0, 0.0]))
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(g))


def test_giou_identity_and_disjoint():
    b = np.array([1.0, 2.0, 3.0, 1.5])
    loss, _ = box_loss(b, b)
    assert loss == pytest.approx(0.0, abs=1e-12)
    # pred spans x in [5, 7] around the anchor, target x in [-3, -1]
    loss, _ = giou_loss(np.array([-5.0, 1.0, 7.0, 1.0]), np.array([3.0, 1.0, -1.0, 1.0]))
    assert loss > 1.0


def test_giou_gradients():
    done, failed, worst = run_cases("giou", 100, seed=11)
    assert failed == 0, worst


def test_giou_weight_scales(rng):
    p, t = rng.uniform(0.5, 3, 4), rng.uniform(0.5, 3, 4)
    l1, g1 = giou_loss(p, t, 1.0)
    l2, g2 = giou_loss(p, t, 0.3)
    assert l2 == pytest.approx(0.3 * l1)
    np.testing.assert_allclose(g2, 0.3 * g1)
