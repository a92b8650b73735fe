"""Backbone building block: a selection sub-block and an FFN sub-block.

Both halves are residual.  The first normalizes the input, expands it with a
1x1 conv and a GELU, runs the selection module, projects back and adds the
result (scaled per channel) onto the input.  The second is the feed-forward
half: norm, 1x1 expand, 3x3 depth-wise conv, GELU, 1x1 contract, again scaled
and added residually.  Zeroing the projection weights therefore turns the
whole block into the identity map.

Normalization uses stored per-channel statistics by default; ``train_norm``
switches to the batch's own statistics (used by the toy trainer).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .errors import ShapeError
from .module import (
    LskGradients,
    LskModuleParams,
    LskState,
    SelectionMode,
    fan_in_uniform,
    init_lsk_params,
    lsk_backward,
    lsk_forward,
    params_astype,
)
from .ops import ConvSpec, Tensor4
from .plan import DecompositionPlan

__all__ = [
    "NormParams",
    "BlockParams",
    "BlockOutput",
    "BlockGradients",
    "init_block_params",
    "block_forward",
    "block_backward",
]

NORM_EPS = 1e-5
RESIDUAL_SCALE_INIT = 1e-2  # near-identity start keeps deep random stacks stable
_FFN_SPEC = ConvSpec(3, 1)


@dataclass
class NormParams:
    scale: np.ndarray
    shift: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def identity(cls, c: int, dtype=np.float32) -> "NormParams":
        return cls(
            scale=np.ones(c, dtype=dtype),
            shift=np.zeros(c, dtype=dtype),
            mean=np.zeros(c, dtype=dtype),
            var=np.ones(c, dtype=dtype),
        )

    def astype(self, dtype) -> "NormParams":
        return NormParams(
            self.scale.astype(dtype),
            self.shift.astype(dtype),
            self.mean.astype(dtype),
            self.var.astype(dtype),
        )


@dataclass
class BlockParams:
    c: int
    ffn_hidden: int
    norm1: NormParams
    pre_weight: np.ndarray  # (c, c)
    pre_bias: np.ndarray
    lsk: LskModuleParams
    post_weight: np.ndarray  # (c, c)
    post_bias: np.ndarray
    scale1: np.ndarray  # (c,)
    norm2: NormParams
    fc1_weight: np.ndarray  # (hidden, c)
    fc1_bias: np.ndarray
    ffn_dw_weight: np.ndarray  # (hidden, 3, 3)
    ffn_dw_bias: np.ndarray
    fc2_weight: np.ndarray  # (c, hidden)
    fc2_bias: np.ndarray
    scale2: np.ndarray  # (c,)

    def astype(self, dtype) -> "BlockParams":
        return BlockParams(
            c=self.c,
            ffn_hidden=self.ffn_hidden,
            norm1=self.norm1.astype(dtype),
            pre_weight=self.pre_weight.astype(dtype),
            pre_bias=self.pre_bias.astype(dtype),
            lsk=params_astype(self.lsk, dtype),
            post_weight=self.post_weight.astype(dtype),
            post_bias=self.post_bias.astype(dtype),
            scale1=self.scale1.astype(dtype),
            norm2=self.norm2.astype(dtype),
            fc1_weight=self.fc1_weight.astype(dtype),
            fc1_bias=self.fc1_bias.astype(dtype),
            ffn_dw_weight=self.ffn_dw_weight.astype(dtype),
            ffn_dw_bias=self.ffn_dw_bias.astype(dtype),
            fc2_weight=self.fc2_weight.astype(dtype),
            fc2_bias=self.fc2_bias.astype(dtype),
            scale2=self.scale2.astype(dtype),
        )


def init_block_params(
    plan: DecompositionPlan,
    c: int,
    ffn_ratio: float,
    c_mid: int | None = None,
    select_kernel: int = 7,
    pooling: Sequence[str] = ("avg", "max"),
    mode: SelectionMode = SelectionMode.SPATIAL,
    rng: np.random.Generator | None = None,
) -> BlockParams:
    if rng is None:
        rng = np.random.default_rng(0)
    hidden = max(round(ffn_ratio * c), 1)
    return BlockParams(
        c=c,
        ffn_hidden=hidden,
        norm1=NormParams.identity(c),
        pre_weight=fan_in_uniform(rng, (c, c), c),
        pre_bias=np.zeros(c, dtype=np.float32),
        lsk=init_lsk_params(plan, c, c_mid, select_kernel, pooling, mode, rng),
        post_weight=fan_in_uniform(rng, (c, c), c),
        post_bias=np.zeros(c, dtype=np.float32),
        scale1=np.full(c, RESIDUAL_SCALE_INIT, dtype=np.float32),
        norm2=NormParams.identity(c),
        fc1_weight=fan_in_uniform(rng, (hidden, c), c),
        fc1_bias=np.zeros(hidden, dtype=np.float32),
        ffn_dw_weight=fan_in_uniform(rng, (hidden, 3, 3), 9),
        ffn_dw_bias=np.zeros(hidden, dtype=np.float32),
        fc2_weight=fan_in_uniform(rng, (c, hidden), hidden),
        fc2_bias=np.zeros(c, dtype=np.float32),
        scale2=np.full(c, RESIDUAL_SCALE_INIT, dtype=np.float32),
    )


@dataclass
class BlockState:
    params: BlockParams
    train_norm: bool
    x: Tensor4
    normed1: Tensor4
    pre_out: Tensor4
    gelu1: Tensor4
    lsk_state: LskState
    lsk_y: Tensor4
    post_out: Tensor4
    y1: Tensor4
    normed2: Tensor4
    fc1_out: Tensor4
    dw_out: Tensor4
    gelu2: Tensor4
    fc2_out: Tensor4
    # batch-norm caches (train mode only)
    bn1_xhat: Tensor4 | None = None
    bn1_inv: np.ndarray | None = None
    bn2_xhat: Tensor4 | None = None
    bn2_inv: np.ndarray | None = None


@dataclass
class BlockOutput:
    y: Tensor4
    masks: Tensor4 | None
    state: BlockState | None


@dataclass
class BlockGradients:
    x: Tensor4
    norm1_scale: np.ndarray
    norm1_shift: np.ndarray
    pre_weight: np.ndarray
    pre_bias: np.ndarray
    lsk: LskGradients
    post_weight: np.ndarray
    post_bias: np.ndarray
    scale1: np.ndarray
    norm2_scale: np.ndarray
    norm2_shift: np.ndarray
    fc1_weight: np.ndarray
    fc1_bias: np.ndarray
    ffn_dw_weight: np.ndarray
    ffn_dw_bias: np.ndarray
    fc2_weight: np.ndarray
    fc2_bias: np.ndarray
    scale2: np.ndarray


def _norm_forward(x, norm: NormParams, train: bool):
    if train:
        y, xhat, inv = ops.batch_norm(x, norm.scale, norm.shift, NORM_EPS)
        return y, xhat, inv
    return ops.affine_channel_norm(x, norm.scale, norm.shift, norm.mean, norm.var, NORM_EPS), None, None


def block_forward(
    x: Tensor4,
    params: BlockParams,
    mode: SelectionMode = SelectionMode.SPATIAL,
    pooling: Sequence[str] = ("avg", "max"),
    train_norm: bool = False,
    keep_state: bool = True,
) -> BlockOutput:
    ops.check_tensor4(x, "block_forward: x")
    if x.shape[1] != params.c:
        raise ShapeError(f"block_forward: input has {x.shape[1]} channels, block expects {params.c}")

    normed1, bn1_xhat, bn1_inv = _norm_forward(x, params.norm1, train_norm)
    pre_out = ops.pointwise_conv(normed1, params.pre_weight, params.pre_bias)
    gelu1 = ops.gelu(pre_out)
    lsk_out = lsk_forward(gelu1, params.lsk, mode, pooling, keep_state=True)
    post_out = ops.pointwise_conv(lsk_out.y, params.post_weight, params.post_bias)
    y1 = ops.elementwise(x, ops.channel_scale(post_out, params.scale1), "add")

    normed2, bn2_xhat, bn2_inv = _norm_forward(y1, params.norm2, train_norm)
    fc1_out = ops.pointwise_conv(normed2, params.fc1_weight, params.fc1_bias)
    dw_out = ops.depthwise_conv(fc1_out, params.ffn_dw_weight, params.ffn_dw_bias, _FFN_SPEC)
    gelu2 = ops.gelu(dw_out)
    fc2_out = ops.pointwise_conv(gelu2, params.fc2_weight, params.fc2_bias)
    y = ops.elementwise(y1, ops.channel_scale(fc2_out, params.scale2), "add")

    state = None
    if keep_state:
        state = BlockState(
            params=params,
            train_norm=train_norm,
            x=x,
            normed1=normed1,
            pre_out=pre_out,
            gelu1=gelu1,
            lsk_state=lsk_out.state,
            lsk_y=lsk_out.y,
            post_out=post_out,
            y1=y1,
            normed2=normed2,
            fc1_out=fc1_out,
            dw_out=dw_out,
            gelu2=gelu2,
            fc2_out=fc2_out,
            bn1_xhat=bn1_xhat,
            bn1_inv=bn1_inv,
            bn2_xhat=bn2_xhat,
            bn2_inv=bn2_inv,
        )
    return BlockOutput(y=y, masks=lsk_out.masks, state=state)


def block_backward(grad_y: Tensor4, state: BlockState) -> BlockGradients:
    p = state.params
    if grad_y.shape != state.x.shape:
        raise ShapeError(f"block_backward: grad_y {grad_y.shape} != input {state.x.shape}")

    # FFN half: y = y1 + scale2 * fc2_out
    grad_y1 = grad_y.copy()
    grad_fc2_scaled = grad_y
    grad_fc2_out, grad_scale2 = ops.channel_scale_backward(grad_fc2_scaled, state.fc2_out, p.scale2)
    grad_gelu2, grad_fc2_w, grad_fc2_b = ops.pointwise_conv_backward(
        grad_fc2_out, state.gelu2, p.fc2_weight
    )
    grad_dw_out = ops.gelu_backward(grad_gelu2, state.dw_out)
    grad_fc1_out, grad_ffn_dw_w, grad_ffn_dw_b = ops.depthwise_conv_backward(
        grad_dw_out, state.fc1_out, p.ffn_dw_weight, _FFN_SPEC
    )
    grad_normed2, grad_fc1_w, grad_fc1_b = ops.pointwise_conv_backward(
        grad_fc1_out, state.normed2, p.fc1_weight
    )
    if state.train_norm:
        g_y1_norm, grad_n2_scale, grad_n2_shift = ops.batch_norm_backward(
            grad_normed2, state.bn2_xhat, state.bn2_inv, p.norm2.scale
        )
    else:
        g_y1_norm, grad_n2_scale, grad_n2_shift = ops.affine_channel_norm_backward(
            grad_normed2, state.y1, p.norm2.scale, p.norm2.mean, p.norm2.var, NORM_EPS
        )
    grad_y1 += g_y1_norm

    # selection half: y1 = x + scale1 * post_out
    grad_x = grad_y1.copy()
    grad_post_out, grad_scale1 = ops.channel_scale_backward(grad_y1, state.post_out, p.scale1)
    grad_lsk_y, grad_post_w, grad_post_b = ops.pointwise_conv_backward(
        grad_post_out, state.lsk_y, p.post_weight
    )
    lsk_grads = lsk_backward(grad_lsk_y, state.lsk_state)
    grad_pre_out = ops.gelu_backward(lsk_grads.x, state.pre_out)
    grad_normed1, grad_pre_w, grad_pre_b = ops.pointwise_conv_backward(
        grad_pre_out, state.normed1, p.pre_weight
    )
    if state.train_norm:
        g_x_norm, grad_n1_scale, grad_n1_shift = ops.batch_norm_backward(
            grad_normed1, state.bn1_xhat, state.bn1_inv, p.norm1.scale
        )
    else:
        g_x_norm, grad_n1_scale, grad_n1_shift = ops.affine_channel_norm_backward(
            grad_normed1, state.x, p.norm1.scale, p.norm1.mean, p.norm1.var, NORM_EPS
        )
    grad_x += g_x_norm

    return BlockGradients(
        x=grad_x,
        norm1_scale=grad_n1_scale,
        norm1_shift=grad_n1_shift,
        pre_weight=grad_pre_w,
        pre_bias=grad_pre_b,
        lsk=lsk_grads,
        post_weight=grad_post_w,
        post_bias=grad_post_b,
        scale1=grad_scale1,
        norm2_scale=grad_n2_scale,
        norm2_shift=grad_n2_shift,
        fc1_weight=grad_fc1_w,
        fc1_bias=grad_fc1_b,
        ffn_dw_weight=grad_ffn_dw_w,
        ffn_dw_bias=grad_ffn_dw_b,
        fc2_weight=grad_fc2_w,
        fc2_bias=grad_fc2_b,
        scale2=grad_scale2,
    )
