"""The selection module: pinned examples, the straight-line composition
oracle, the three selection modes, and the scalar closed-form backward."""

import numpy as np
import pytest

from lsknet import ops
from lsknet.errors import ShapeError
from lsknet.module import (
    SelectionMode,
    init_lsk_params,
    lsk_backward,
    lsk_forward,
    params_astype,
)
from lsknet.plan import validate_plan

from oracles import lsk_composition, sigmoid_ref


def make_params(plan_seq, c_in, c_mid, q=3, mode=SelectionMode.SPATIAL, seed=0, dtype=np.float64):
    plan = validate_plan(plan_seq)
    params = init_lsk_params(
        plan, c_in, c_mid, select_kernel=q, mode=mode, rng=np.random.default_rng(seed)
    )
    return params_astype(params, dtype)


class TestForwardContracts:
    def test_shape_contract_two_kernels(self, rng):
        params = make_params([(5, 1), (7, 3)], c_in=64, c_mid=32, q=7)
        x = rng.uniform(-1, 1, size=(1, 64, 32, 32))
        out = lsk_forward(x, params)
        assert out.y.shape == (1, 64, 32, 32)
        assert out.masks.shape == (1, 2, 32, 32)

    def test_zero_selection_conv_gives_masks_of_exactly_half(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2)
        params.select_weight[...] = 0.0
        params.select_bias[...] = 0.0
        x = rng.uniform(-1, 1, size=(2, 4, 6, 6))
        out = lsk_forward(x, params)
        assert (out.masks == 0.5).all()
        # hence the fused feature is fuse(0.5 * sum of mixed branches)
        mixed_sum = sum(
            ops.pointwise_conv(u, params.mix_weights[i], params.mix_biases[i])
            for i, u in enumerate(_dw_chain(x, params))
        )
        expected = ops.elementwise(
            x, ops.pointwise_conv(0.5 * mixed_sum, params.fuse_weight, params.fuse_bias), "mul"
        )
        np.testing.assert_allclose(out.y, expected, atol=1e-12)

    def test_zero_input_annihilates_output(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, seed=3)
        x = np.zeros((1, 4, 5, 5))
        out = lsk_forward(x, params)
        assert not out.y.any()

    def test_masks_strictly_inside_unit_interval(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, seed=1)
        x = rng.uniform(-2, 2, size=(1, 4, 8, 8))
        masks = lsk_forward(x, params).masks
        assert (masks > 0.0).all() and (masks < 1.0).all()

    def test_channel_count_mismatch(self, rng):
        params = make_params([(3, 1)], c_in=4, c_mid=2)
        with pytest.raises(ShapeError, match="channels"):
            lsk_forward(rng.uniform(-1, 1, size=(1, 3, 5, 5)), params)

    def test_empty_pooling_rejected(self, rng):
        params = make_params([(3, 1)], c_in=4, c_mid=2)
        with pytest.raises(ShapeError, match="pooling"):
            lsk_forward(rng.uniform(-1, 1, size=(1, 4, 5, 5)), params, pooling=())


def _dw_chain(x, params):
    """Outputs of each depth-wise stage (test helper mirroring the recursion)."""
    from lsknet.ops import ConvSpec

    outs, u = [], x
    for i, spec in enumerate(params.plan.stages):
        u = ops.depthwise_conv(u, params.dw_weights[i], params.dw_biases[i], ConvSpec(spec.k, spec.d))
        outs.append(u)
    return outs


class TestCompositionOracle:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_straight_line_composition(self, seed):
        rng = np.random.default_rng(seed)
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, q=3, seed=seed + 50)
        x = rng.uniform(-2, 2, size=(1, 4, 6, 6))
        out = lsk_forward(x, params)
        ref_y, ref_masks = lsk_composition(x, params)
        np.testing.assert_allclose(out.y, ref_y, atol=1e-6)
        np.testing.assert_allclose(out.masks, ref_masks, atol=1e-6)

    def test_matches_composition_with_wide_selection_kernel(self):
        rng = np.random.default_rng(99)
        params = make_params([(5, 1), (7, 3)], c_in=6, c_mid=3, q=7, seed=7)
        x = rng.uniform(-2, 2, size=(2, 6, 8, 8))
        out = lsk_forward(x, params)
        ref_y, _ = lsk_composition(x, params)
        np.testing.assert_allclose(out.y, ref_y, atol=1e-6)


class TestModes:
    def test_none_mode_sums_branches_unweighted(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, seed=2)
        x = rng.uniform(-1, 1, size=(1, 4, 6, 6))
        out = lsk_forward(x, params, mode=SelectionMode.NONE)
        assert out.masks is None
        mixed = [
            ops.pointwise_conv(u, params.mix_weights[i], params.mix_biases[i])
            for i, u in enumerate(_dw_chain(x, params))
        ]
        expected = ops.elementwise(
            x, ops.pointwise_conv(sum(mixed), params.fuse_weight, params.fuse_bias), "mul"
        )
        np.testing.assert_allclose(out.y, expected, atol=1e-12)

    def test_saturated_single_kernel_matches_none_mode(self, rng):
        # one branch with the selection logit pushed to +inf (bias 20):
        # the mask saturates at 1 and spatial selection degenerates to a sum
        params = make_params([(5, 1)], c_in=4, c_mid=2, seed=4)
        params.select_bias[...] = 20.0
        x = rng.uniform(-1, 1, size=(1, 4, 6, 6))
        spatial = lsk_forward(x, params, mode=SelectionMode.SPATIAL).y
        unweighted = lsk_forward(x, params, mode=SelectionMode.NONE).y
        np.testing.assert_allclose(spatial, unweighted, atol=1e-6)

    def test_channel_mode_shapes_and_branch_softmax(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, mode=SelectionMode.CHANNEL, seed=5)
        x = rng.uniform(-1, 1, size=(2, 4, 6, 6))
        out = lsk_forward(x, params, mode=SelectionMode.CHANNEL)
        assert out.y.shape == x.shape
        assert out.masks is None  # spatial masks exist in spatial mode only
        weights = out.state.cs_weights
        assert weights.shape == (2, 2, 2)  # (batch, branches, c_mid)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_channel_mode_without_cs_params_fails(self, rng):
        params = make_params([(3, 1)], c_in=4, c_mid=2, mode=SelectionMode.SPATIAL)
        with pytest.raises(ShapeError, match="channel"):
            lsk_forward(rng.uniform(-1, 1, size=(1, 4, 5, 5)), params, mode=SelectionMode.CHANNEL)

    @pytest.mark.parametrize("pooling", [("avg",), ("max",)])
    def test_single_pooling_ablation(self, rng, pooling):
        """The pooling-set axis: a one-descriptor selection conv still yields
        per-branch masks of the right shape."""
        plan = validate_plan([(3, 1), (5, 2)])
        params = init_lsk_params(
            plan, 4, 2, select_kernel=3, pooling=pooling, rng=np.random.default_rng(0)
        )
        assert params.select_weight.shape[1] == 1
        x = rng.uniform(-1, 1, size=(1, 4, 6, 6))
        out = lsk_forward(x.astype(np.float32), params, pooling=pooling)
        assert out.masks.shape == (1, 2, 6, 6)

    def test_pooling_set_mismatch_with_params(self, rng):
        params = make_params([(3, 1)], c_in=4, c_mid=2)  # built for avg+max
        with pytest.raises(ShapeError, match="pooling"):
            lsk_forward(rng.uniform(-1, 1, size=(1, 4, 5, 5)), params, pooling=("avg",))


class TestBackward:
    def test_zero_grad_y_gives_zero_gradients(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, seed=6)
        x = rng.uniform(-1, 1, size=(1, 4, 6, 6))
        out = lsk_forward(x, params)
        g = lsk_backward(np.zeros_like(out.y), out.state)
        assert not g.x.any()
        assert not any(a.any() for a in g.dw_weights + g.dw_biases)
        assert not g.select_weight.any() and not g.fuse_weight.any()

    def test_scalar_closed_form(self):
        """Single pixel, one stage, one channel: y = x * f(x) with every
        coefficient known, so dy/dx has a hand-derivable closed form."""
        wc, bd = 0.7, 0.1  # depth-wise centre weight and bias
        m, mb = 1.3, -0.2  # mixer
        sa, sm, sb = 0.4, -0.3, 0.05  # selection taps (avg, max) and bias
        f, fb = 0.9, 0.2  # fusion
        params = make_params([(3, 1)], c_in=1, c_mid=1, q=3)
        params.dw_weights[0][...] = 0.0
        params.dw_weights[0][0, 1, 1] = wc
        params.dw_biases[0][...] = bd
        params.mix_weights[0][...] = m
        params.mix_biases[0][...] = mb
        params.select_weight[...] = 0.0
        params.select_weight[0, 0, 1, 1] = sa
        params.select_weight[0, 1, 1, 1] = sm
        params.select_bias[...] = sb
        params.fuse_weight[...] = f
        params.fuse_bias[...] = fb

        x_val = 0.6
        x = np.full((1, 1, 1, 1), x_val)
        out = lsk_forward(x, params)
        u1 = wc * x_val + bd
        ut = m * u1 + mb
        logit = (sa + sm) * ut + sb
        mask = float(sigmoid_ref(np.array(logit)))
        s_val = f * mask * ut + fb
        assert out.y[0, 0, 0, 0] == pytest.approx(x_val * s_val, abs=1e-12)

        g = lsk_backward(np.ones_like(out.y), out.state)
        dmask = mask * (1 - mask) * (sa + sm) * m * wc
        ds_dx = f * (dmask * ut + mask * m * wc)
        expected = s_val + x_val * ds_dx
        assert g.x[0, 0, 0, 0] == pytest.approx(expected, abs=1e-12)


class TestInputDependence:
    def test_masks_distinguish_noise_from_flat_regions(self):
        """Left half white noise, right half constant: the selection masks
        must differ between the regions (the mechanism is input-dependent)."""
        rng = np.random.default_rng(11)
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, q=3, seed=12)
        x = np.full((1, 4, 16, 16), 0.5)
        x[:, :, :, :8] = rng.standard_normal((1, 4, 16, 8))
        masks = lsk_forward(x, params).masks
        assert masks.max() - masks.min() > 1e-4  # not constant
        left = masks[:, :, :, :8].mean(axis=(0, 2, 3))
        right = masks[:, :, :, 8:].mean(axis=(0, 2, 3))
        assert np.abs(left - right).max() > 1e-3

    def test_forward_determinism(self, rng):
        params = make_params([(3, 1), (5, 2)], c_in=4, c_mid=2, seed=8, dtype=np.float32)
        x = rng.uniform(-1, 1, size=(2, 4, 8, 8)).astype(np.float32)
        a = lsk_forward(x, params).y
        b = lsk_forward(x, params).y
        assert (a == b).all()
