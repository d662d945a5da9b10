import numpy as np
import pytest

from app.core.errors import ConfigError, NumericFaultError, UnsupportedLayerError
from app.services import tensor_ops as ops
from app.services.reference_ops import reference_conv2d, reference_deconv2d
from app.services.tensor_ops import BnParams, ConvWeights


def _bn(c, gamma=1.0, beta=0.0, mean=0.0, var=1.0, eps=0.0):
    full = lambda v: np.full(c, v, dtype=np.float32)  # noqa: E731
    return BnParams(full(gamma), full(beta), full(mean), full(var), eps)


class TestConv2d:
    def test_hand_computed_3x3(self):
        x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
        w = ConvWeights(np.ones((1, 1, 3, 3), dtype=np.float32), padding=(1, 1))
        out = ops.conv2d(x, w)
        assert out[0, 0, 0, 0] == 12
        assert out[0, 0, 1, 1] == 45

    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
        w = ConvWeights(np.ones((1, 1, 1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32))
        np.testing.assert_array_equal(ops.conv2d(x, w), x)

    def test_zero_kernel(self, rng):
        x = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        w = ConvWeights(np.zeros((4, 3, 3, 3), dtype=np.float32), np.zeros(4, dtype=np.float32), padding=(1, 1))
        assert not ops.conv2d(x, w).any()

    def test_depthwise_matches_reference(self, rng):
        x = rng.standard_normal((1, 6, 9, 7)).astype(np.float32)
        w = ConvWeights(rng.standard_normal((6, 1, 5, 5)).astype(np.float32), groups=6, stride=(2, 2), padding=(2, 2))
        np.testing.assert_allclose(ops.conv2d(x, w), reference_conv2d(x, w), atol=1e-5)

    def test_channel_mismatch(self, rng):
        x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
        w = ConvWeights(np.ones((2, 4, 3, 3), dtype=np.float32))
        with pytest.raises(ConfigError, match="channel mismatch"):
            ops.conv2d(x, w)

    def test_kernel_larger_than_input(self):
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        with pytest.raises(ConfigError):
            ops.conv2d(x, ConvWeights(np.ones((1, 1, 5, 5), dtype=np.float32)))

    def test_unsupported_kernel(self):
        x = np.ones((1, 1, 8, 8), dtype=np.float32)
        with pytest.raises(UnsupportedLayerError):
            ops.conv2d(x, ConvWeights(np.ones((1, 1, 7, 7), dtype=np.float32)))


class TestDeconv2d:
    def test_single_pixel_scatter(self):
        x = np.ones((1, 1, 1, 1), dtype=np.float32)
        w = ConvWeights(np.ones((1, 1, 4, 4), dtype=np.float32), stride=(2, 2), padding=(1, 1))
        np.testing.assert_array_equal(ops.deconv2d(x, w), np.ones((1, 1, 2, 2)))

    @pytest.mark.parametrize("h, w", [(1, 1), (4, 3), (8, 6)])
    def test_doubles_spatial_size(self, rng, h, w):
        x = rng.standard_normal((1, 2, h, w)).astype(np.float32)
        k = ConvWeights(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), stride=(2, 2), padding=(1, 1))
        assert ops.deconv2d(x, k).shape == (1, 3, 2 * h, 2 * w)

    def test_zero_input(self, rng):
        k = ConvWeights(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), stride=(2, 2), padding=(1, 1))
        assert not ops.deconv2d(np.zeros((1, 2, 3, 3), dtype=np.float32), k).any()

    def test_grouped_rejected(self):
        k = ConvWeights(np.ones((2, 1, 4, 4), dtype=np.float32), groups=2, stride=(2, 2), padding=(1, 1))
        with pytest.raises(UnsupportedLayerError):
            ops.deconv2d(np.ones((1, 2, 2, 2), dtype=np.float32), k)


class TestOracleSuite:
    """Randomized cases against the nested-loop references."""

    def test_random_conv_cases(self, rng):
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            groups = int(rng.choice([1, 2]))
            c_in = groups * int(rng.integers(1, 4))
            c_out = groups * int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, k // 2 + 1))
            h, w = int(rng.integers(k, 9)), int(rng.integers(k, 9))
            x = rng.standard_normal((1, c_in, h, w)).astype(np.float32)
            bias = rng.standard_normal(c_out).astype(np.float32) if rng.random() < 0.5 else None
            wt = ConvWeights(
                rng.standard_normal((c_out, c_in // groups, k, k)).astype(np.float32),
                bias, groups, (stride, stride), (pad, pad),
            )
            np.testing.assert_allclose(ops.conv2d(x, wt), reference_conv2d(x, wt), atol=1e-5)

    def test_random_deconv_cases(self, rng):
        for _ in range(50):
            k = int(rng.choice([3, 4, 5]))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x = rng.standard_normal((1, c_in, h, w)).astype(np.float32)
            bias = rng.standard_normal(c_out).astype(np.float32) if rng.random() < 0.5 else None
            wt = ConvWeights(
                rng.standard_normal((c_in, c_out, k, k)).astype(np.float32), bias,
                stride=(stride, stride), padding=(pad, pad),
            )
            np.testing.assert_allclose(ops.deconv2d(x, wt), reference_deconv2d(x, wt), atol=1e-5)

    def test_deconv_is_adjoint_of_conv(self, rng):
        for _ in range(20):
            x = rng.standard_normal((1, 3, 5, 4)).astype(np.float64)
            kernel = rng.standard_normal((3, 2, 4, 4))
            wt = ConvWeights(kernel, stride=(2, 2), padding=(1, 1))
            y = ops.deconv2d(x, wt, acc_dtype=np.float64)
            z = rng.standard_normal(y.shape)
            # <deconv(x), z> == <x, conv(z)> with the same kernel read as (c_out, c_in) conv weights
            lhs = float(np.sum(y * z))
            rhs = float(np.sum(x * ops.conv2d(z, wt, acc_dtype=np.float64)))
            assert lhs == pytest.approx(rhs, rel=1e-4)

    def test_conv_is_linear(self, rng):
        wt = ConvWeights(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), padding=(1, 1))
        a = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        b = rng.standard_normal((1, 3, 6, 6)).astype(np.float32)
        lhs = ops.conv2d(2 * a + 3 * b, wt)
        rhs = 2 * ops.conv2d(a, wt) + 3 * ops.conv2d(b, wt)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-4)


class TestBatchnorm:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        np.testing.assert_allclose(ops.batchnorm_inference(x, _bn(3)), x)

    def test_closed_form(self):
        x = np.full((1, 1, 1, 1), 3.0, dtype=np.float32)
        out = ops.batchnorm_inference(x, _bn(1, gamma=2, beta=1, mean=1, var=4))
        assert out[0, 0, 0, 0] == pytest.approx(3.0)

    def test_zero_gamma_gives_beta(self, rng):
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        np.testing.assert_allclose(ops.batchnorm_inference(x, _bn(2, gamma=0, beta=0.5, eps=1e-5)), 0.5)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError):
            ops.batchnorm_inference(np.zeros((1, 3, 2, 2), dtype=np.float32), _bn(2))


class TestFuseConvBn:
    def test_identity_normalization(self, rng):
        w = ConvWeights(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
        fused = ops.fuse_conv_bn(w, _bn(2))
        np.testing.assert_allclose(fused.kernel, w.kernel)
        np.testing.assert_allclose(fused.bias, 0)

    def test_scale_two(self, rng):
        w = ConvWeights(rng.standard_normal((1, 2, 3, 3)).astype(np.float32), np.array([0.5], dtype=np.float32))
        fused = ops.fuse_conv_bn(w, _bn(1, gamma=2, var=0, eps=1))
        np.testing.assert_allclose(fused.kernel, 2 * w.kernel)
        np.testing.assert_allclose(fused.bias, [1.0])

    @pytest.mark.parametrize("transposed", [False, True])
    def test_matches_unfused_pipeline(self, rng, transposed):
        for _ in range(50):
            if transposed:
                w = ConvWeights(rng.standard_normal((3, 4, 4, 4)).astype(np.float32), stride=(2, 2), padding=(1, 1))
            else:
                w = ConvWeights(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), padding=(1, 1))
            p = BnParams(
                rng.uniform(0.5, 1.5, 4).astype(np.float32),
                rng.uniform(-1, 1, 4).astype(np.float32),
                rng.uniform(-1, 1, 4).astype(np.float32),
                rng.uniform(1e-3, 2, 4).astype(np.float32),
            )
            x = rng.standard_normal((1, 3, 5, 5)).astype(np.float32)
            op = ops.deconv2d if transposed else ops.conv2d
            expected = ops.batchnorm_inference(op(x, w), p)
            got = op(x, ops.fuse_conv_bn(w, p, transposed))
            np.testing.assert_allclose(got, expected, atol=1e-4, rtol=1e-4)

    def test_channel_mismatch(self):
        with pytest.raises(ConfigError, match="cannot fuse"):
            ops.fuse_conv_bn(ConvWeights(np.ones((3, 1, 1, 1), dtype=np.float32)), _bn(2))


class TestActivationsAndPools:
    def test_relu(self):
        x = np.array([-1, 0, 2], dtype=np.float32).reshape(1, 1, 1, 3)
        np.testing.assert_array_equal(ops.relu(x).ravel(), [0, 0, 2])

    def test_leaky_relu(self):
        x = np.array([-2.0], dtype=np.float32).reshape(1, 1, 1, 1)
        assert ops.leaky_relu(x, 0.1)[0, 0, 0, 0] == pytest.approx(-0.2)

    def test_leaky_relu_rejects_bad_slope(self):
        with pytest.raises(ConfigError):
            ops.leaky_relu(np.zeros((1, 1, 1, 1), dtype=np.float32), 1.5)

    def test_softmax_symmetric(self):
        out = ops.softmax(np.zeros((1, 2, 1, 1), dtype=np.float32))
        np.testing.assert_allclose(out.ravel(), [0.5, 0.5])

    def test_pools(self):
        x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 1, 2, 2)
        assert ops.maxpool(x, 2, 2)[0, 0, 0, 0] == 4
        assert ops.avgpool(x, 2, 2)[0, 0, 0, 0] == pytest.approx(2.5)

    def test_constant_input_pools(self):
        x = np.full((1, 2, 6, 6), 1.5, dtype=np.float32)
        np.testing.assert_allclose(ops.maxpool(x, 3, 2, 1), 1.5)
        np.testing.assert_allclose(ops.avgpool(x, 3, 2, 1), 1.5)

    def test_eltwise_and_concat(self, rng):
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(ops.eltwise_sum(x, np.zeros_like(x)), x)
        np.testing.assert_allclose(ops.eltwise_sum(x, x), 2 * x)
        one = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
        cat = ops.concat([one, x])
        assert cat.shape == (1, 4, 2, 2)
        np.testing.assert_array_equal(cat[:, :1], one)

    def test_eltwise_shape_mismatch(self):
        with pytest.raises(ConfigError):
            ops.eltwise_sum(np.zeros((1, 1, 2, 2), np.float32), np.zeros((1, 2, 2, 2), np.float32))


class TestAsTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NumericFaultError):
            ops.as_tensor(np.full((1, 1, 1, 1), np.nan))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ConfigError, match="4-D"):
            ops.as_tensor(np.zeros((3, 3)))
