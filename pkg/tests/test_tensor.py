import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groupnet import tensor as T
from groupnet.tensor import ConvGeometry, DimensionError

from oracles import central_difference, conv_loop, linear_loop


def _geom(x, w, stride=1, padding=0):
    return ConvGeometry.from_arrays(x, w, stride, padding)


class TestConvGeometry:
    @pytest.mark.parametrize("padding", [0, 1, 2])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_size_formula(self, padding, stride):
        g = ConvGeometry(3, 4, 3, 3, 9, 7, stride, padding)
        assert g.out_h == (9 + 2 * padding - 3) // stride + 1
        assert g.out_w == (7 + 2 * padding - 3) // stride + 1

    def test_empty_output_rejected(self):
        with pytest.raises(ValueError):
            ConvGeometry(1, 1, 5, 5, 3, 3)

    def test_mismatch_names_axis(self):
        g = ConvGeometry(3, 4, 3, 3, 8, 8)
        with pytest.raises(DimensionError) as err:
            g.check(np.zeros((1, 2, 8, 8)))
        assert err.value.axis == "channel"
        with pytest.raises(DimensionError) as err:
            g.check(np.zeros((1, 3, 8, 8)), np.zeros((4, 3, 3, 2)))
        assert err.value.axis == "kernel_w"


class TestConv2dRef:
    def test_all_ones(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 3, 3))
        out = T.conv2d_ref(x, w, _geom(x, w))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 5))
        w = np.ones((1, 1, 1, 1))
        np.testing.assert_array_equal(T.conv2d_ref(x, w, _geom(x, w)), x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 4, 3, 3))
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            got = T.conv2d_ref(x, w, _geom(x, w, stride, padding))
            np.testing.assert_allclose(got, conv_loop(x, w, stride, padding), rtol=1e-5, atol=1e-9)

    def test_frozen_integer_case(self):
        # values produced by oracles.conv_loop on these integer operands
        x = (np.arange(2 * 2 * 4 * 4) % 7 - 3).reshape(2, 2, 4, 4).astype(float)
        w = (np.arange(3 * 2 * 3 * 3) % 5 - 2).reshape(3, 2, 3, 3).astype(float)
        row = T.conv2d_ref(x, w, _geom(x, w, 1, 1))[0, :, 0, :]
        np.testing.assert_array_equal(row, [[-4, -4, 4, 3], [7, 0, -3, 5], [8, -1, -5, 2]])
        strided = T.conv2d_ref(x, w, _geom(x, w, 2, 1))[1]
        np.testing.assert_array_equal(strided, [[[-6, 8], [-9, -8]], [[2, -1], [6, 15]], [[5, 0], [-9, 8]]])

    def test_shape_error(self):
        x = np.zeros((1, 3, 4, 4))
        w = np.zeros((2, 4, 3, 3))
        with pytest.raises(DimensionError):
            T.conv2d_ref(x, w, ConvGeometry(4, 2, 3, 3, 4, 4))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-10, 10, allow_nan=False), seed=st.integers(0, 2**16))
    def test_linear_in_input(self, a, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 3, 5, 5))
        w = rng.standard_normal((2, 3, 3, 3))
        g = _geom(x, w, 1, 1)
        np.testing.assert_allclose(T.conv2d_ref(a * x, w, g), a * T.conv2d_ref(x, w, g), rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(T.conv2d_ref(x, a * w, g), a * T.conv2d_ref(x, w, g), rtol=1e-6, atol=1e-9)


class TestLinearRef:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        np.testing.assert_array_equal(T.linear_ref(x, np.eye(4)), x)

    def test_hand_case(self):
        out = T.linear_ref(np.array([[1.0, 2.0]]), np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
        np.testing.assert_array_equal(out, [[1, 2, 3]])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 16))
        w = rng.standard_normal((10, 16))
        np.testing.assert_allclose(T.linear_ref(x, w), linear_loop(x, w), rtol=1e-5)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.linear_ref(np.zeros((2, 3)), np.zeros((4, 5)))


class TestFastConv:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1), (1, 2), (2, 2)])
    def test_matches_reference(self, stride, padding):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 7, 7))
        w = rng.standard_normal((4, 3, 3, 3))
        out, _ = T.conv2d(x, w, stride, padding)
        np.testing.assert_allclose(out, T.conv2d_ref(x, w, _geom(x, w, stride, padding)), rtol=1e-10, atol=1e-12)

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        r = rng.standard_normal((2, 3, 3, 3))
        out, cache = T.conv2d(x, w, 2, 1)
        gx, gw = T.conv2d_backward(r, cache)
        loss = lambda: float((T.conv2d(x, w, 2, 1)[0] * r).sum())  # noqa: E731
        np.testing.assert_allclose(gx, central_difference(loss, x, 1e-3), rtol=1e-3, atol=1e-8)
        np.testing.assert_allclose(gw, central_difference(loss, w, 1e-3), rtol=1e-3, atol=1e-8)

    def test_linear_backward(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 6))
        w = rng.standard_normal((3, 6))
        r = rng.standard_normal((4, 3))
        _, cache = T.linear(x, w)
        gx, gw = T.linear_backward(r, cache)
        loss = lambda: float((T.linear(x, w)[0] * r).sum())  # noqa: E731
        np.testing.assert_allclose(gx, central_difference(loss, x, 1e-3), rtol=1e-3)
        np.testing.assert_allclose(gw, central_difference(loss, w, 1e-3), rtol=1e-3)


class TestBatchNorm:
    def test_zero_variance_channel(self):
        x = np.full((4, 2, 3, 3), 5.0)
        out, _ = T.batchnorm_forward(x, T.BatchNormState.fresh(2, np.float64), train=True)
        np.testing.assert_array_equal(out, 0.0)

    def test_train_normalizes(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (16, 3, 4, 4))
        out, _ = T.batchnorm_forward(x, T.BatchNormState.fresh(3, np.float64), train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_statistics(self):
        x = np.random.default_rng(1).normal(2.0, 1.0, (8, 1, 2, 2))
        st_ = T.BatchNormState.fresh(1, np.float64)
        T.batchnorm_forward(x, st_, train=True)
        np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean())
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(ddof=1))

    def test_eval_uses_running_stats(self):
        st_ = T.BatchNormState(np.array([2.0]), np.array([1.0]), np.array([3.0]), np.array([4.0]), eps=1e-5)
        out, cache = T.batchnorm_forward(np.full((1, 1, 1, 1), 5.0), st_, train=False)
        assert cache is None
        np.testing.assert_allclose(out, 2.0 * 2.0 / np.sqrt(4.0 + 1e-5) + 1.0)

    def test_invalid_state(self):
        with pytest.raises(ValueError):
            T.BatchNormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), eps=0.0)
        with pytest.raises(ValueError):
            T.BatchNormState(np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1))

    @pytest.mark.parametrize("shape", [(2, 3, 4, 4), (5, 3)])
    def test_backward_finite_differences(self, shape):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(shape)
        gamma = rng.uniform(0.5, 1.5, 3)
        beta = rng.standard_normal(3)
        r = rng.standard_normal(shape)

        def loss():
            st_ = T.BatchNormState(gamma, beta, np.zeros(3), np.ones(3))
            return float((T.batchnorm_forward(x, st_, True)[0] * r).sum())

        _, cache = T.batchnorm_forward(x, T.BatchNormState(gamma, beta, np.zeros(3), np.ones(3)), True)
        gx, gg, gb = T.batchnorm_backward(r, cache)
        np.testing.assert_allclose(gx, central_difference(loss, x, 1e-3), rtol=1e-3, atol=1e-7)
        np.testing.assert_allclose(gg, central_difference(loss, gamma, 1e-3), rtol=1e-3)
        np.testing.assert_allclose(gb, central_difference(loss, beta, 1e-3), rtol=1e-3)


class TestPooling:
    @pytest.mark.parametrize("padding", [0, 1])
    @pytest.mark.parametrize("stride", [1, 2])
    def test_output_shapes(self, stride, padding):
        x = np.random.default_rng(0).standard_normal((1, 2, 6, 6))
        for pool in (T.maxpool, T.avgpool):
            out, _ = pool(x, 3, stride, padding)
            n = T.out_size(6, 3, stride, padding)
            assert out.shape == (1, 2, n, n)

    def test_maxpool_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        out, _ = T.maxpool(x, 2)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])

    @pytest.mark.parametrize("stride,padding", [(2, 0), (1, 0), (2, 1)])
    def test_backward_finite_differences(self, stride, padding):
        rng = np.random.default_rng(7)
        x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6).astype(float) / 10  # distinct values, no ties
        for fwd, bwd in ((T.maxpool, T.maxpool_backward), (T.avgpool, T.avgpool_backward)):
            out, cache = fwd(x, 2, stride, padding)
            r = rng.standard_normal(out.shape)
            loss = lambda: float((fwd(x, 2, stride, padding)[0] * r).sum())  # noqa: E731
            np.testing.assert_allclose(bwd(r, cache), central_difference(loss, x, 1e-3), rtol=1e-3, atol=1e-8)

    def test_global_avgpool_backward(self):
        x = np.random.default_rng(8).standard_normal((2, 3, 4, 4))
        r = np.random.default_rng(9).standard_normal((2, 3))
        _, shape = T.global_avgpool(x)
        loss = lambda: float((T.global_avgpool(x)[0] * r).sum())  # noqa: E731
        np.testing.assert_allclose(T.global_avgpool_backward(r, shape), central_difference(loss, x, 1e-3), rtol=1e-3)


class TestSoftmaxCrossEntropy:
    @pytest.mark.parametrize("classes", [2, 10, 37])
    def test_uniform_logits(self, classes):
        loss, _ = T.softmax_cross_entropy(np.zeros((4, classes)), np.zeros(4, dtype=int))
        assert loss == pytest.approx(np.log(classes), rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(ValueError):
            T.softmax_cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        z = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, 5)
        _, g = T.softmax_cross_entropy(z, y)
        fd = central_difference(lambda: T.softmax_cross_entropy(z, y)[0], z, 1e-3)
        np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-9)

    def test_finite_for_extreme_logits(self):
        loss, g = T.softmax_cross_entropy(np.array([[1e4, -1e4, 0.0]]), np.array([1]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))
