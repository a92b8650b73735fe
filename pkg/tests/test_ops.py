"""Forward kernels against the naive-loop oracles, plus the pinned examples,
shape validation, and determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsknet import ops
from lsknet.errors import ShapeError
from lsknet.ops import ConvSpec

from oracles import (
    affine_norm_loops,
    channel_pool_loops,
    conv2d_loops,
    depthwise_conv_loops,
    gelu_ref,
    global_avg_pool_loops,
    pointwise_conv_loops,
    sigmoid_ref,
)


def rand(rng, shape):
    return rng.uniform(-2.0, 2.0, size=shape)


class TestConvSpec:
    def test_same_padding_derived(self):
        assert ConvSpec(5, 1).padding == 2
        assert ConvSpec(7, 3).padding == 9
        assert ConvSpec(23, 1).padding == 11

    def test_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            ConvSpec(4, 1)

    def test_rejects_wrong_padding(self):
        with pytest.raises(ShapeError):
            ConvSpec(5, 1, padding=1)

    def test_span(self):
        assert ConvSpec(7, 3).span == 19


class TestDepthwise:
    def test_dirac_kernel_is_identity(self, rng):
        x = rand(rng, (2, 3, 6, 6))
        for dilation in (1, 2, 3):
            w = np.zeros((3, 3, 3))
            w[:, 1, 1] = 1.0
            out = ops.depthwise_conv(x, w, np.zeros(3), ConvSpec(3, dilation))
            np.testing.assert_array_equal(out, x)

    def test_ones_kernel_counts_neighbourhood(self):
        x = np.ones((1, 1, 5, 5))
        w = np.ones((1, 3, 3))
        out = ops.depthwise_conv(x, w, np.zeros(1), ConvSpec(3, 1))
        assert out[0, 0, 2, 2] == 9.0
        assert out[0, 0, 0, 0] == 4.0
        assert out[0, 0, 0, 2] == 6.0

    def test_matches_loop_oracle_dilated(self, rng):
        x = rand(rng, (2, 3, 8, 8))
        w = rand(rng, (3, 5, 5))
        b = rand(rng, (3,))
        out = ops.depthwise_conv(x, w, b, ConvSpec(5, 2))
        ref = depthwise_conv_loops(x, w, b, 5, 2)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_channel_independence(self, rng):
        # perturbing channel 0 must not move channel 1's output
        x = rand(rng, (1, 2, 4, 4))
        w = rand(rng, (2, 3, 3))
        b = np.zeros(2)
        base = ops.depthwise_conv(x, w, b, ConvSpec(3, 1))
        x2 = x.copy()
        x2[:, 0] += 1.0
        out = ops.depthwise_conv(x2, w, b, ConvSpec(3, 1))
        np.testing.assert_array_equal(out[:, 1], base[:, 1])
        assert not np.allclose(out[:, 0], base[:, 0])

    def test_weight_shape_mismatch(self, rng):
        x = rand(rng, (1, 3, 4, 4))
        with pytest.raises(ShapeError, match="weights shape"):
            ops.depthwise_conv(x, rand(rng, (2, 3, 3)), np.zeros(3), ConvSpec(3, 1))


class TestConv2d:
    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (4, 3)])
    def test_matches_loop_oracle(self, rng, stride, padding):
        k = 3 if padding == 1 else 7
        x = rand(rng, (2, 3, 8, 8))
        w = rand(rng, (4, 3, k, k))
        b = rand(rng, (4,))
        out = ops.conv2d(x, w, b, stride=stride, padding=padding)
        ref = conv2d_loops(x, w, b, stride, padding)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_output_shape_stride(self, rng):
        x = rand(rng, (1, 3, 64, 64))
        w = rand(rng, (8, 3, 7, 7))
        out = ops.conv2d(x, w, np.zeros(8), stride=4, padding=3)
        assert out.shape == (1, 8, 16, 16)


class TestPointwise:
    def test_identity_weights(self, rng):
        x = rand(rng, (2, 4, 3, 3))
        out = ops.pointwise_conv(x, np.eye(4), np.zeros(4))
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_dot_product_example(self):
        x = np.array([3.0, 4.0]).reshape(1, 2, 1, 1)
        out = ops.pointwise_conv(x, np.array([[1.0, 1.0]]), np.zeros(1))
        assert out[0, 0, 0, 0] == 7.0

    def test_matches_loop_oracle(self, rng):
        x = rand(rng, (2, 5, 4, 4))
        w = rand(rng, (3, 5))
        b = rand(rng, (3,))
        np.testing.assert_allclose(
            ops.pointwise_conv(x, w, b), pointwise_conv_loops(x, w, b), atol=1e-6
        )

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError, match="channels"):
            ops.pointwise_conv(rand(rng, (1, 4, 2, 2)), rand(rng, (3, 5)), np.zeros(3))


class TestChannelPool:
    def test_single_channel_identity(self, rng):
        x = rand(rng, (2, 1, 3, 3))
        for mode in ("avg", "max"):
            np.testing.assert_array_equal(ops.channel_pool(x, mode), x)

    def test_two_channel_values(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0], x[0, 1] = 1.0, 3.0
        assert ops.channel_pool(x, "avg")[0, 0, 0, 0] == 2.0
        assert ops.channel_pool(x, "max")[0, 0, 0, 0] == 3.0

    def test_matches_loop_oracle(self, rng):
        x = rand(rng, (2, 7, 4, 4))
        for mode in ("avg", "max"):
            np.testing.assert_allclose(
                ops.channel_pool(x, mode), channel_pool_loops(x, mode), atol=1e-12
            )

    def test_unknown_mode(self, rng):
        with pytest.raises(ShapeError):
            ops.channel_pool(rand(rng, (1, 2, 2, 2)), "median")


class TestElementwiseAndScalars:
    def test_sigmoid_zero_is_half(self):
        out = ops.sigmoid(np.zeros((1, 2, 3, 3)))
        assert (out == 0.5).all()

    def test_sigmoid_matches_formula(self, rng):
        x = rand(rng, (2, 3, 4, 4))
        np.testing.assert_allclose(ops.sigmoid(x), sigmoid_ref(x), atol=1e-12)

    def test_sigmoid_extreme_inputs_finite(self):
        x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4]).reshape(1, 1, 1, 5)
        out = ops.sigmoid(x)
        assert np.isfinite(out).all()
        assert out[0, 0, 0, 0] == 0.0 or out[0, 0, 0, 0] < 1e-20
        assert out[0, 0, 0, 4] == 1.0

    def test_gelu_matches_formula(self, rng):
        x = rand(rng, (2, 3, 4, 4))
        np.testing.assert_allclose(ops.gelu(x), gelu_ref(x), atol=1e-12)

    def test_elementwise_requires_matching_shapes(self, rng):
        with pytest.raises(ShapeError, match="mismatch"):
            ops.elementwise(rand(rng, (1, 2, 3, 3)), rand(rng, (1, 2, 3, 4)), "mul")

    def test_no_implicit_broadcasting(self, rng):
        # a (n,1,h,w) against (n,c,h,w) must fail in elementwise
        with pytest.raises(ShapeError):
            ops.elementwise(rand(rng, (1, 1, 3, 3)), rand(rng, (1, 4, 3, 3)), "add")

    def test_concat_preserves_order(self, rng):
        a, b = rand(rng, (1, 2, 4, 4)), rand(rng, (1, 3, 4, 4))
        out = ops.concat_channels([a, b])
        assert out.shape == (1, 5, 4, 4)
        np.testing.assert_array_equal(out[:, :2], a)
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_broadcast_mask_mul(self, rng):
        x = rand(rng, (2, 4, 3, 3))
        m = rand(rng, (2, 1, 3, 3))
        np.testing.assert_allclose(ops.broadcast_mask_mul(x, m), x * m, atol=1e-12)
        with pytest.raises(ShapeError):
            ops.broadcast_mask_mul(x, rand(rng, (2, 2, 3, 3)))


class TestNorms:
    def test_identity_configuration(self, rng):
        x = rand(rng, (2, 3, 4, 4))
        out = ops.affine_channel_norm(
            x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), eps=0.0
        )
        np.testing.assert_allclose(out, x, atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        x = rand(rng, (2, 4, 3, 3))
        scale, shift = rand(rng, (4,)), rand(rng, (4,))
        mean, var = rand(rng, (4,)), np.abs(rand(rng, (4,))) + 0.1
        out = ops.affine_channel_norm(x, scale, shift, mean, var, eps=1e-5)
        ref = affine_norm_loops(x, scale, shift, mean, var, 1e-5)
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_batch_norm_zero_mean_unit_var(self, rng):
        x = rand(rng, (4, 3, 5, 5))
        y, _, _ = ops.batch_norm(x, np.ones(3), np.zeros(3))
        assert abs(y.mean()) < 1e-10
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_global_avg_pool(self, rng):
        x = rand(rng, (2, 3, 4, 4))
        np.testing.assert_allclose(ops.global_avg_pool(x), global_avg_pool_loops(x), atol=1e-12)


class TestDeterminismAndFiniteness:
    def test_bit_identical_reruns(self, rng):
        x = rand(rng, (2, 4, 8, 8)).astype(np.float32)
        w = rand(rng, (4, 5, 5)).astype(np.float32)
        b = rand(rng, (4,)).astype(np.float32)
        a = ops.depthwise_conv(x, w, b, ConvSpec(5, 2))
        c = ops.depthwise_conv(x, w, b, ConvSpec(5, 2))
        assert (a == c).all()

    def test_float32_stays_float32(self, rng):
        x = rand(rng, (1, 2, 4, 4)).astype(np.float32)
        out = ops.gelu(ops.sigmoid(x))
        assert out.dtype == np.float32

    @given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=6))
    @settings(max_examples=25, deadline=None)
    def test_finite_in_finite_out(self, c, hw):
        rng = np.random.default_rng(c * 100 + hw)
        x = rng.uniform(-50, 50, size=(1, c, hw, hw)).astype(np.float32)
        for out in (ops.sigmoid(x), ops.gelu(x), ops.channel_pool(x, "avg")):
            assert np.isfinite(out).all()


@settings(max_examples=40, deadline=None)
@given(
    kernel=st.sampled_from([3, 5]),
    dilation=st.integers(min_value=1, max_value=3),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_dirac_identity_property(kernel, dilation, seed):
    """A centred delta kernel is the identity for any dilation."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(1, 2, 6, 6))
    w = np.zeros((2, kernel, kernel))
    w[:, kernel // 2, kernel // 2] = 1.0
    out = ops.depthwise_conv(x, w, np.zeros(2), ConvSpec(kernel, dilation))
    np.testing.assert_array_equal(out, x)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_shape_preservation_property(seed):
    """Same-padded convs and pointwise/elementwise ops preserve (h, w)."""
    rng = np.random.default_rng(seed)
    n, c, h, w = 1, int(rng.integers(1, 5)), int(rng.integers(2, 8)), int(rng.integers(2, 8))
    x = rng.uniform(-2, 2, size=(n, c, h, w))
    spec = ConvSpec(3, int(rng.integers(1, 3)))
    assert ops.depthwise_conv(x, rng.uniform(-1, 1, (c, 3, 3)), np.zeros(c), spec).shape == x.shape
    assert ops.pointwise_conv(x, rng.uniform(-1, 1, (c + 1, c)), np.zeros(c + 1)).shape == (
        n,
        c + 1,
        h,
        w,
    )
    assert ops.channel_pool(x, "max").shape == (n, 1, h, w)
