import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference
import symbox.autodiff as ad
from symbox.errors import InvalidArgumentError, NumericError

vec = arrays(np.float64, 4, elements=st.floats(-3, 3))


def analytic_grad(f, x):
    leaf = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    ad.backward(f(leaf))
    return leaf.grad


def check_against_fd(f, x, tol=1e-6):
    g = analytic_grad(f, x)
    ref = central_difference(lambda v: f(ad.Tensor(v)).item(), x)
    np.testing.assert_allclose(g, ref, atol=tol, rtol=tol)


class TestPrimitives:
    def test_relu(self):
        np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 2.0])).data, [0, 2])

    def test_atan2(self):
        assert ad.atan2(ad.Tensor(0.0), ad.Tensor(1.0)).item() == 0.0

    def test_conv_delta_kernel(self):
        rng = np.random.default_rng(0)
        img = rng.normal(size=(1, 1, 9, 7))
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ad.conv2d(ad.Tensor(img), ad.Tensor(w))
        np.testing.assert_allclose(out.data[..., 1:-1, 1:-1], img[..., 1:-1, 1:-1], atol=1e-14)

    def test_conv_matches_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        for stride in (1, 2):
            out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride).data
            xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            ho = out.shape[2]
            ref = np.zeros_like(out)
            for i in range(ho):
                for j in range(ho):
                    patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
            np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv_rejects_bad_stride(self):
        with pytest.raises(InvalidArgumentError):
            ad.conv2d(ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.zeros((1, 1, 3, 3))), stride=3)

    def test_broadcast_add(self):
        a = ad.Tensor(np.ones((2, 3)), requires_grad=True)
        b = ad.Tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.sum(a + b))
        np.testing.assert_array_equal(b.grad, [2, 2, 2])

    def test_nan_raises(self):
        with pytest.raises(NumericError) as ei:
            ad.log(ad.Tensor(-1.0))
        assert ei.value.op == "log"

    def test_no_grad_leaves(self):
        t = ad.Tensor(2.0) * 3.0
        assert not t.requires_grad
        assert ad.backward(ad.sum(t)) == {}


class TestBackward:
    def test_square(self):
        assert analytic_grad(lambda x: x * x, 3.0) == pytest.approx(6.0)

    def test_cos_double(self):
        assert analytic_grad(lambda x: ad.cos(2.0 * x), 0.0) == pytest.approx(0.0)

    def test_needs_scalar(self):
        with pytest.raises(InvalidArgumentError):
            ad.backward(ad.Tensor(np.ones(3), requires_grad=True))

    def test_shared_subexpression(self):
        # y = x*x used twice: d/dx (y + y) = 4x
        def f(x):
            y = x * x
            return y + y
        assert analytic_grad(f, 1.5) == pytest.approx(6.0)

    def test_accumulates_across_calls(self):
        x = ad.Tensor(2.0, requires_grad=True)
        ad.backward(x * x)
        ad.backward(x * x)
        assert x.grad == pytest.approx(8.0)

    def test_sign_zero_at_kink(self):
        assert analytic_grad(lambda x: ad.abs(x), 0.0) == 0.0
        assert analytic_grad(lambda x: ad.relu(x), 0.0) == 0.0

    def test_five_op_graph(self):
        def f(x):
            a = ad.sin(x[0]) * x[1]
            b = ad.exp(0.3 * x[2]) / (1.0 + x[0] * x[0])
            c = ad.sqrt(x[1] * x[1] + 2.0)
            return ad.log(1.5 + ad.sigmoid(a + b)) + c
        rng = np.random.default_rng(5)
        for _ in range(10):
            x = rng.uniform(-2, 2, 3)
            g = analytic_grad(f, x)
            ref = central_difference(lambda v: f(ad.Tensor(v)).item(), x)
            err = np.abs(g - ref) / np.maximum(1.0, np.abs(g))
            assert err.max() < 1e-4


class TestGradCheck:
    @given(vec)
    def test_sum_squares(self, x):
        assert ad.grad_check(lambda t: ad.sum(t * t), x) < 1e-6

    @given(arrays(np.float64, 5, elements=st.floats(0.2, 3)))
    @settings(max_examples=30)
    def test_unary_ops(self, x):
        for f in (ad.sin, ad.cos, ad.exp, ad.log, ad.sqrt, ad.sigmoid, ad.softplus, lambda t: ad.power(t, 2.5)):
            assert ad.grad_check(lambda t: ad.sum(f(t)), x) < 1e-6

    def test_binary_ops(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.5, 2, 6)
        assert ad.grad_check(lambda t: ad.sum(t[:3] / t[3:] - t[:3] * t[3:]), x) < 1e-6
        assert ad.grad_check(lambda t: ad.sum(ad.atan2(t[:3], t[3:] - 1.0)), x) < 1e-6

    def test_smooth_l1_both_sides(self):
        x = np.array([-2.0, -0.4, 0.3, 1.7])
        assert ad.grad_check(lambda t: ad.sum(ad.smooth_l1(t, 1.0)), x) < 1e-6

    def test_shape_ops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3))
        def f(t):
            a = ad.transpose(t).reshape(3, 2)
            b = ad.concat([a, a * 2.0], axis=1)
            c = ad.stack([b[0], b[2]], axis=0)
            return ad.sum(ad.matmul(c, ad.transpose(b)) ** 2) + ad.mean(t, axis=0).sum()
        assert ad.grad_check(f, x) < 1e-6

    def test_getitem_repeated_index(self):
        x = np.array([1.0, 2.0, 3.0])
        g = analytic_grad(lambda t: ad.sum(t[np.array([0, 0, 2])] ** 2), x)
        np.testing.assert_allclose(g, [4.0, 0.0, 6.0])

    def test_conv(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        for stride in (1, 2):
            assert ad.grad_check(lambda t: ad.sum(ad.conv2d(t, ad.Tensor(w), stride=stride) ** 2), x) < 1e-6
            assert ad.grad_check(lambda t: ad.sum(ad.conv2d(ad.Tensor(x), t, stride=stride) ** 2), w) < 1e-6

    def test_maximum_minimum(self):
        x = np.array([-1.0, 0.5, 2.0])
        assert ad.grad_check(lambda t: ad.sum(ad.maximum(t, 0.0) * 2 + ad.minimum(t, 1.0)), x) < 1e-6

    def test_reports_broken_gradient(self):
        # a deliberately wrong backward must be caught
        def bad(t):
            out = ad._node(t.data * 2.0, (t,), lambda g: (g * 3.0,), "bad")
            return ad.sum(out)
        assert ad.grad_check(bad, np.ones(2)) > 0.3
