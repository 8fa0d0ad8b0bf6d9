import numpy as np
import pytest

from lndet import kernels


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0)])
def test_im2col_numba_matches_numpy(k, stride, pad, rng):
    x = rng.normal(size=(2, 3, 9, 7))
    np.testing.assert_array_equal(kernels.im2col_nb(x, k, stride, pad), kernels.im2col_np(x, k, stride, pad))


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1)])
def test_col2im_numba_matches_numpy(k, stride, pad, rng):
    shape = (2, 3, 9, 7)
    oh = kernels.conv_out_size(9, k, stride, pad)
    ow = kernels.conv_out_size(7, k, stride, pad)
    d = rng.normal(size=(2, oh, ow, 3 * k * k))
    np.testing.assert_allclose(kernels.col2im_nb(d, shape, k, stride, pad),
                               kernels.col2im_np(d, shape, k, stride, pad), rtol=1e-12, atol=1e-12)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    cols = kernels.im2col_np(x, 3, 2, 1)
    d = rng.normal(size=cols.shape)
    lhs = np.sum(cols * d)
    rhs = np.sum(x * kernels.col2im_np(d, x.shape, 3, 2, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_bilinear_gather_numba_matches_numpy(rng):
    feat = rng.normal(size=(2, 4, 6, 5))
    px = rng.uniform(-1.5, 7.0, size=(2, 30))
    py = rng.uniform(-1.5, 6.0, size=(2, 30))
    np.testing.assert_allclose(kernels.bilinear_gather_nb(feat, px, py),
                               kernels.bilinear_gather_np(feat, px, py), rtol=0, atol=1e-14)


def test_bilinear_backward_numba_matches_numpy(rng):
    feat = rng.normal(size=(2, 4, 6, 5))
    px = rng.uniform(-1.5, 7.0, size=(2, 30))
    py = rng.uniform(-1.5, 6.0, size=(2, 30))
    g = rng.normal(size=(2, 30, 4))
    for a, b in zip(kernels.bilinear_backward_nb(feat, px, py, g), kernels.bilinear_backward_np(feat, px, py, g)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_bilinear_at_grid_points_reads_values(rng):
    feat = rng.normal(size=(1, 2, 4, 4))
    px = np.array([[0.0, 3.0, 2.0]])
    py = np.array([[0.0, 1.0, 3.0]])
    out = kernels.bilinear_gather_np(feat, px, py)
    np.testing.assert_array_equal(out[0, 1], feat[0, :, 3, 1])
    np.testing.assert_array_equal(out[0, 2], feat[0, :, 2, 3])


def test_bilinear_outside_is_zero():
    feat = np.ones((1, 1, 3, 3))
    out = kernels.bilinear_gather_np(feat, np.array([[-2.0, 5.0]]), np.array([[1.0, 1.0]]))
    np.testing.assert_array_equal(out, 0.0)
