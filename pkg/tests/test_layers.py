import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapnet import layers as L
from lapnet.tensor import ShapeError

from oracles import conv2d_loops, maxpool_loops, numeric_grad


def _scalar(out, r):
    return float(np.sum(out * r))


class TestConvForward:
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]),
           st.integers(1, 2), st.integers(5, 9), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_loops(self, n, c_in, c_out, k, stride, size, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, c_in, size, size + 1))
        kern = rng.normal(size=(c_out, c_in, k, k))
        bias = rng.normal(size=c_out)
        pad = (k - 1) // 2
        out, _ = L.conv2d_forward(x, L.ConvParams(kern, bias, stride, pad))
        np.testing.assert_allclose(out, conv2d_loops(x, kern, bias, stride, pad), atol=1e-12)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_matches_loops(self, rng, stride):
        x = rng.normal(size=(2, 4, 7, 6))
        kern = rng.normal(size=(4, 1, 3, 3))
        out, _ = L.conv2d_forward(x, L.ConvParams(kern, None, stride, 1, groups=4))
        np.testing.assert_allclose(out, conv2d_loops(x, kern, None, stride, 1, groups=4), atol=1e-12)

    def test_cross_correlation_not_convolution(self):
        x = np.zeros((1, 1, 3, 3))
        x[0, 0, 0, 0] = 1.0
        kern = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        out, _ = L.conv2d_forward(x, L.ConvParams(kern, None, 1, 1))
        # the top-left input pixel meets kernel tap (1, 1) at output (0, 0)
        assert out[0, 0, 0, 0] == kern[0, 0, 1, 1]
        assert out[0, 0, 1, 1] == kern[0, 0, 0, 0]

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="input channels"):
            L.conv2d_forward(rng.normal(size=(1, 2, 4, 4)), L.ConvParams(np.zeros((1, 3, 3, 3))))

    def test_grouping_other_than_depthwise_rejected(self):
        with pytest.raises(ValueError, match="depthwise"):
            L.ConvParams(np.zeros((4, 2, 3, 3)), groups=2)

    def test_output_size(self):
        assert L.conv_output_size(256, 7, 2, 3) == 128
        assert L.conv_output_size(64, 3, 1, 1) == 64


class TestConvBackward:
    @pytest.mark.parametrize("k,stride,groups", [(3, 1, 1), (1, 1, 1), (7, 2, 1), (3, 1, 3), (3, 2, 3)])
    def test_against_finite_differences(self, rng, k, stride, groups):
        c = 3
        x = rng.normal(size=(2, c, 6, 5))
        kern = rng.normal(size=(c if groups > 1 else 2, 1 if groups > 1 else c, k, k))
        bias = rng.normal(size=kern.shape[0])
        p = L.ConvParams(kern, bias, stride, (k - 1) // 2, groups)
        out, cache = L.conv2d_forward(x, p)
        r = rng.normal(size=out.shape)
        dx, dk, db = L.conv2d_backward(r, cache)

        def f():
            return _scalar(L.conv2d_forward(x, p)[0], r)

        np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
        np.testing.assert_allclose(dk, numeric_grad(f, kern), atol=1e-7)
        np.testing.assert_allclose(db, numeric_grad(f, bias), atol=1e-7)

    def test_missing_cache(self):
        with pytest.raises(L.MissingCacheError):
            L.conv2d_backward(np.zeros((1, 1, 2, 2)), None)


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
        p = L.BatchNormParams.init(3)
        out, _ = L.batchnorm_forward(x, p, "train")
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-3)

    def test_running_stats_unbiased(self, rng):
        x = rng.normal(size=(2, 2, 3, 3))
        p = L.BatchNormParams.init(2)
        L.batchnorm_forward(x, p, "train")
        m = 2 * 3 * 3
        np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))

    def test_eval_uses_running(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        p = L.BatchNormParams.init(2)
        p.running_mean[:] = [1.0, -1.0]
        p.running_var[:] = [4.0, 1.0]
        out, _ = L.batchnorm_forward(x, p, "eval")
        expect = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(
            np.array([4.0, 1.0]) + 1e-5)[None, :, None, None]
        np.testing.assert_allclose(out, expect)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_backward(self, rng, mode):
        x = rng.normal(size=(3, 2, 3, 3))
        p = L.BatchNormParams.init(2)
        p.gamma[:] = [0.7, 1.3]
        p.beta[:] = [0.1, -0.2]
        p.running_var[:] = [2.0, 0.5]
        out, cache = L.batchnorm_forward(x, p, mode)
        r = rng.normal(size=out.shape)
        dx, dg, db = L.batchnorm_backward(r, cache)

        def f():
            q = L.BatchNormParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
            return _scalar(L.batchnorm_forward(x, q, mode)[0], r)

        np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
        np.testing.assert_allclose(dg, numeric_grad(f, p.gamma), atol=1e-7)
        np.testing.assert_allclose(db, numeric_grad(f, p.beta), atol=1e-7)


class TestActivations:
    def test_relu_elu_values(self):
        x = np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(L.relu_forward(x)[0].ravel(), [0, 0, 3])
        np.testing.assert_allclose(L.elu_forward(x)[0].ravel(), [np.expm1(-2.0), 0, 3])

    def test_sigmoid_stable(self):
        x = np.array([-1000.0, -40.0, 0.0, 40.0, 1000.0])
        with np.errstate(over="raise", invalid="raise"):
            s = L.sigmoid(x)
        assert s[2] == 0.5
        assert 0 < s[1] < 1e-17 and s[0] == 0.0 and s[-1] == 1.0

    @pytest.mark.parametrize("kind", ["relu", "elu"])
    def test_backward(self, rng, kind):
        x = rng.normal(size=(2, 2, 3, 3))
        out, cache = L.activation_forward(x, kind)
        r = rng.normal(size=x.shape)
        dx = L.activation_backward(r, cache, kind)
        np.testing.assert_allclose(dx, numeric_grad(lambda: _scalar(L.activation_forward(x, kind)[0], r), x),
                                   atol=1e-7)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            L.activation_forward(np.zeros((1, 1, 1, 1)), "tanh")


class TestPoolingAndUpsample:
    def test_maxpool_matches_loops(self, rng):
        x = rng.normal(size=(2, 3, 6, 4))
        np.testing.assert_array_equal(L.maxpool2d_forward(x)[0], maxpool_loops(x))

    def test_maxpool_gradient_routes_to_argmax(self):
        x = np.array([[1.0, 4.0], [3.0, 2.0]]).reshape(1, 1, 2, 2)
        _, cache = L.maxpool2d_forward(x)
        dx = L.maxpool2d_backward(np.ones((1, 1, 1, 1)), cache)
        np.testing.assert_array_equal(dx.ravel(), [0, 1, 0, 0])

    def test_maxpool_odd_size(self):
        with pytest.raises(ShapeError):
            L.maxpool2d_forward(np.zeros((1, 1, 3, 4)))

    def test_upsample_backward_is_adjoint(self, rng):
        x = rng.normal(size=(2, 3, 3, 4))
        y = rng.normal(size=(2, 3, 6, 8))
        assert np.isclose(np.sum(L.upsample_nearest(x) * y), np.sum(x * L.upsample_backward(y)))


class TestLinearAndSeparable:
    def test_linear_backward(self, rng):
        p = L.LinearParams(rng.normal(size=(3, 5)), rng.normal(size=3))
        x = rng.normal(size=(4, 5))
        out, cache = L.linear_forward(x, p)
        r = rng.normal(size=out.shape)
        dx, dw, db = L.linear_backward(r, cache)
        f = lambda: _scalar(L.linear_forward(x, p)[0], r)  # noqa: E731
        np.testing.assert_allclose(dx, numeric_grad(f, x), atol=1e-7)
        np.testing.assert_allclose(dw, numeric_grad(f, p.weight), atol=1e-7)

    def test_separable_equals_composition(self, rng):
        x = rng.normal(size=(2, 4, 5, 5))
        dw = L.ConvParams(rng.normal(size=(4, 1, 3, 3)), None, 1, 1, 4)
        pw = L.ConvParams(rng.normal(size=(6, 4, 1, 1)))
        out, _ = L.depthwise_separable_forward(x, dw, pw)
        ref = conv2d_loops(conv2d_loops(x, dw.kernel, padding=1, groups=4), pw.kernel)
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_separable_needs_pointwise(self, rng):
        dw = L.ConvParams(rng.normal(size=(4, 1, 3, 3)), None, 1, 1, 4)
        with pytest.raises(ValueError, match="pointwise"):
            L.depthwise_separable_forward(np.zeros((1, 4, 3, 3)), dw, dw)


class TestModules:
    def test_conv_bn_act_naming(self, rng):
        m = L.conv_bn_act(3, 8, 3, rng, "elu")
        names = [n for n, _ in m.named_parameters()]
        assert names == ["conv.weight", "bn.weight", "bn.bias"]
        assert [n for n, _ in m.named_buffers()] == ["bn.running_mean", "bn.running_var"]
        assert m.num_parameters() == 3 * 8 * 9 + 16

    def test_grads_accumulate_and_zero(self, rng):
        m = L.Conv2d(2, 2, 3, rng)
        x = rng.normal(size=(1, 2, 4, 4))
        m.backward(np.ones_like(m.forward(x)))
        first = m.grads["weight"].copy()
        m.forward(x)
        m.backward(np.ones((1, 2, 4, 4)))
        np.testing.assert_allclose(m.grads["weight"], 2 * first)
        m.zero_grad()
        assert not m.grads["weight"].any()

    def test_train_eval_propagates(self, rng):
        m = L.conv_bn_act(2, 2, 1, rng, "relu")
        m.eval()
        assert not m.layers[1].training
        m.train()
        assert m.layers[1].training

    def test_he_init_scale(self):
        w = L.he_normal(np.random.default_rng(0), (256, 128, 3, 3), 128 * 9)
        assert abs(w.std() - np.sqrt(2 / (128 * 9))) < 1e-3
