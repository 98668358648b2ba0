import numpy as np
import pytest

from atvnet import layers
from atvnet.layers import (BatchNorm2DParams, Conv2DParams, batchnorm_backward, batchnorm_forward,
                           conv2d_backward, conv2d_direct, conv2d_forward, finite_difference_check)


def six_loop_conv(x, w, b, stride, pad, dil):
    """Independent oracle: explicit zero-padded array, nested loops."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - (k - 1) * dil - 1) // stride + 1
    wo = (wd + 2 * pad - (k - 1) * dil - 1) // stride + 1
    y = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for a in range(k):
                            for q in range(k):
                                s += w[oc, ic, a, q] * xp[bi, ic, i * stride + a * dil, j * stride + q * dil]
                    y[bi, oc, i, j] = s
    return y


def test_pointwise_conv_is_scaling():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 5))
    p = Conv2DParams(np.full((1, 1, 1, 1), 2.5), np.zeros(1))
    np.testing.assert_allclose(conv2d_forward(x, p), 2.5 * x, rtol=1e-15)


def test_all_ones_3x3_on_constant():
    x = np.full((1, 1, 6, 6), 1.5)
    y = conv2d_forward(x, Conv2DParams(np.ones((1, 1, 3, 3)), None, padding=1))
    np.testing.assert_allclose(y[0, 0, 1:-1, 1:-1], 9 * 1.5)
    assert y[0, 0, 0, 0] == pytest.approx(4 * 1.5)


def test_dilated_5x5_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 7, 7))
    w = rng.standard_normal((3, 2, 5, 5))
    b = rng.standard_normal(3)
    y = conv2d_forward(x, Conv2DParams(w, b, 1, 4, 2))
    ref = six_loop_conv(x, w, b, 1, 4, 2)
    np.testing.assert_allclose(y, ref, rtol=1e-5, atol=1e-12)
    np.testing.assert_allclose(conv2d_direct(x, Conv2DParams(w, b, 1, 4, 2)), ref, rtol=1e-12, atol=1e-12)


def test_output_size_formula():
    for h, k, s, p, d in [(7, 5, 1, 4, 2), (8, 3, 2, 1, 1), (9, 3, 2, 2, 2), (16, 1, 2, 0, 1)]:
        x = np.zeros((1, 1, h, h))
        y = conv2d_forward(x, Conv2DParams(np.zeros((1, 1, k, k)), None, s, p, d))
        assert y.shape[2] == (h + 2 * p - (k - 1) * d - 1) // s + 1


def test_conv_errors():
    x = np.zeros((1, 2, 4, 4))
    with pytest.raises(ValueError, match="channels"):
        conv2d_forward(x, Conv2DParams(np.zeros((1, 3, 1, 1))))
    with pytest.raises(ValueError, match="extent"):
        conv2d_forward(x, Conv2DParams(np.zeros((1, 2, 5, 5)), None, 1, 0, 2))
    p = Conv2DParams(np.zeros((1, 2, 3, 3)), None, 1, 1)
    with pytest.raises(ValueError, match="dy shape"):
        conv2d_backward(x, p, np.zeros((1, 1, 3, 3)))


def test_conv_is_linear():
    rng = np.random.default_rng(2)
    p = Conv2DParams(rng.standard_normal((4, 3, 3, 3)), None, 1, 2, 2)
    x1, x2 = rng.standard_normal((2, 2, 3, 9, 9))
    lhs = conv2d_forward(1.7 * x1 - 0.4 * x2, p)
    rhs = 1.7 * conv2d_forward(x1, p) - 0.4 * conv2d_forward(x2, p)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_1x1_conv_is_channel_matmul():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((6, 5, 1, 1))
    y = conv2d_forward(x, Conv2DParams(w))
    ref = np.einsum("oi,nihw->nohw", w[:, :, 0, 0], x)
    np.testing.assert_allclose(y, ref, rtol=1e-13, atol=1e-14)


def test_backward_zero_dy_and_scalar_case():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 1, 3, 3))
    p = Conv2DParams(np.array([[[[0.7]]]]), np.zeros(1))
    dx, dw, db = conv2d_backward(x, p, np.zeros((2, 1, 3, 3)))
    assert not dx.any() and not dw.any() and not db.any()
    dy = rng.standard_normal((2, 1, 3, 3))
    _, dw, db = conv2d_backward(x, p, dy)
    assert dw.item() == pytest.approx((x * dy).sum(), rel=1e-12)
    assert db.item() == pytest.approx(dy.sum(), rel=1e-12)


def test_same_padding_bias_gradient_mass():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 6, 6))
    p = Conv2DParams(rng.standard_normal((4, 3, 5, 5)), np.zeros(4), 1, layers.same_padding(5, 2), 2)
    dy = rng.standard_normal((2, 4, 6, 6))
    _, _, db = conv2d_backward(x, p, dy)
    assert db.sum() == pytest.approx(dy.sum(), rel=1e-12)


@pytest.mark.parametrize("k,stride,dil", [(1, 1, 1), (3, 1, 1), (3, 2, 1), (5, 1, 2), (5, 2, 2), (3, 1, 3)])
def test_conv_backward_finite_differences(k, stride, dil):
    rng = np.random.default_rng(10 + k + stride + dil)
    x = rng.standard_normal((2, 2, 7, 6))
    p = Conv2DParams(rng.standard_normal((3, 2, k, k)), rng.standard_normal(3), stride,
                     layers.same_padding(k, dil), dil)
    r = rng.standard_normal(conv2d_forward(x, p).shape)
    dx, dw, db = conv2d_backward(x, p, r)
    rep = finite_difference_check(lambda: float((conv2d_forward(x, p) * r).sum()),
                                  {"x": x, "w": p.weight, "b": p.bias}, {"x": dx, "w": dw, "b": db})
    assert rep.passed, rep


def test_gradcheck_linear_layer_is_exact():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 2, 3, 3))
    p = Conv2DParams(rng.standard_normal((2, 2, 1, 1)), rng.standard_normal(2))
    r = rng.standard_normal((1, 2, 3, 3))
    dx, dw, db = conv2d_backward(x, p, r)
    rep = finite_difference_check(lambda: float((conv2d_forward(x, p) * r).sum()),
                                  {"x": x, "w": p.weight}, {"x": dx, "w": dw})
    assert rep.max_rel_error < 1e-10


def test_gradcheck_rejects_float32():
    x = np.zeros(3, np.float32)
    with pytest.raises(TypeError):
        finite_difference_check(lambda: 0.0, {"x": x}, {"x": x})


def test_gradcheck_reports_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = finite_difference_check(lambda: float((x ** 2).sum()), {"x": x}, {"x": np.array([2.0, 0.0])})
    assert not rep.passed
    assert rep.failures[0][:2] == ("x", 1)


# batch norm

def _bn(c, **kw):
    return BatchNorm2DParams.fresh(c, np.float64, **kw)


def test_batchnorm_normalised_input_is_fixed_point():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y, _ = batchnorm_forward(x, _bn(2))
    np.testing.assert_allclose(y, x, atol=1e-4)


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 4, 6, 6)) * 3 + 2
    y, _ = batchnorm_forward(x, _bn(4))
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    p = _bn(4)
    p.beta[:] = 5
    y, _ = batchnorm_forward(x, p)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 5.0, atol=1e-12)


def test_batchnorm_running_stats():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 4, 4)) + 1
    p = _bn(3)
    batchnorm_forward(x, p)
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    p.mode = "eval"
    rm, rv = p.running_mean.copy(), p.running_var.copy()
    y, _ = batchnorm_forward(x, p)
    assert p.running_mean.tobytes() == rm.tobytes() and p.running_var.tobytes() == rv.tobytes()
    np.testing.assert_allclose(y, (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5))


def test_batchnorm_needs_two_values_per_channel():
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((1, 2, 1, 1)), _bn(2))


def test_batchnorm_empty_stats_eval_warns(caplog):
    p = _bn(2, mode="eval")
    p.running_var[:] = 0
    batchnorm_forward(np.zeros((1, 2, 2, 2)), p)
    assert "empty running statistics" in caplog.text


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_backward_finite_differences(mode):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 4, 4)) * 2 - 1
    p = BatchNorm2DParams(rng.uniform(0.5, 2, 3), rng.standard_normal(3),
                          rng.standard_normal(3), rng.uniform(0.5, 2, 3), mode=mode)
    y, cache = batchnorm_forward(x, p, update_stats=False)
    r = rng.standard_normal(y.shape)
    dx, dg, db = batchnorm_backward(r, p, cache)
    rep = finite_difference_check(
        lambda: float((batchnorm_forward(x, p, update_stats=False)[0] * r).sum()),
        {"x": x, "gamma": p.gamma, "beta": p.beta}, {"x": dx, "gamma": dg, "beta": db})
    assert rep.passed, rep
