"""Dense rank-4 tensor kernels with explicit backward passes.

All operations work on plain ``numpy`` arrays in ``(batch, channels, rows,
cols)`` layout.  The production dtype is float32; every kernel also accepts
float64 inputs unchanged, which is what the gradient checker uses.  There is
no implicit broadcasting anywhere: mismatched shapes raise :class:`ShapeError`
so wiring bugs in module assembly fail loudly instead of silently stretching
axes.

Backward functions return gradients of a sum-reduction loss, i.e. they
contract the upstream gradient ``grad_out`` with the local Jacobian.
Accumulation order is fixed (kernel taps in row-major order, branches in list
order), so repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "ConvSpec",
    "Tensor4",
    "check_tensor4",
    "depthwise_conv",
    "depthwise_conv_backward",
    "conv2d",
    "conv2d_backward",
    "pointwise_conv",
    "pointwise_conv_backward",
    "channel_pool",
    "channel_pool_backward",
    "elementwise",
    "elementwise_backward",
    "sigmoid",
    "sigmoid_backward",
    "gelu",
    "gelu_backward",
    "concat_channels",
    "concat_channels_backward",
    "broadcast_mask_mul",
    "broadcast_mask_mul_backward",
    "channel_scale",
    "channel_scale_backward",
    "affine_channel_norm",
    "affine_channel_norm_backward",
    "batch_norm",
    "batch_norm_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
]

# A Tensor4 is an ndarray with ndim == 4 and strictly positive dims; the alias
# exists for signatures, the invariants are enforced by check_tensor4.
Tensor4 = np.ndarray

_GELU_COEFF = 0.044715
_GELU_SCALE = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class ConvSpec:
    """Kernel size, dilation and the derived "same" padding of one conv layer.

    The padding is pinned to ``dilation * (kernel - 1) // 2`` so that output
    spatial size always equals input spatial size (zero padding outside the
    borders).
    """

    kernel: int
    dilation: int = 1
    padding: int = -1  # -1 means: derive the "same" value

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"ConvSpec: kernel must be odd and positive, got {self.kernel}")
        if self.dilation < 1:
            raise ShapeError(f"ConvSpec: dilation must be >= 1, got {self.dilation}")
        same = self.dilation * (self.kernel - 1) // 2
        if self.padding == -1:
            object.__setattr__(self, "padding", same)
        elif self.padding != same:
            raise ShapeError(
                f"ConvSpec: padding {self.padding} breaks the same-size rule "
                f"(expected {same} for kernel {self.kernel}, dilation {self.dilation})"
            )

    @property
    def span(self) -> int:
        """Pixel footprint of the dilated kernel: dilation*(kernel-1)+1."""
        return self.dilation * (self.kernel - 1) + 1


def check_tensor4(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate the rank-4 layout contract and return ``x`` unchanged."""
    if not isinstance(x, np.ndarray):
        raise ShapeError(f"{name}: expected ndarray, got {type(x).__name__}")
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4 dims (n,c,h,w), got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"{name}: all dims must be >= 1, got shape {x.shape}")
    return x


def _check_vector(v: np.ndarray, length: int, name: str) -> np.ndarray:
    if not isinstance(v, np.ndarray) or v.ndim != 1 or v.shape[0] != length:
        got = getattr(v, "shape", type(v).__name__)
        raise ShapeError(f"{name}: expected vector of length {length}, got {got}")
    return v


def _pad2d(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


# ---------------------------------------------------------------------------
# depth-wise convolution
# ---------------------------------------------------------------------------

def depthwise_conv(x: Tensor4, weights: np.ndarray, bias: np.ndarray, spec: ConvSpec) -> Tensor4:
    """Per-channel k x k convolution with "same" zero padding.

    ``weights`` has shape (c, k, k): each output channel depends only on the
    matching input channel.  Dilation spreads the taps without changing the
    parameter count.
    """
    check_tensor4(x, "depthwise_conv: x")
    n, c, h, w = x.shape
    if weights.ndim != 3 or weights.shape != (c, spec.kernel, spec.kernel):
        raise ShapeError(
            f"depthwise_conv: weights shape {weights.shape} does not match "
            f"channels {c} and kernel {spec.kernel}"
        )
    _check_vector(bias, c, "depthwise_conv: bias")
    xp = _pad2d(x, spec.padding)
    d = spec.dilation
    acc = np.zeros((n, c, h, w), dtype=x.dtype)
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            window = xp[:, :, i * d : i * d + h, j * d : j * d + w]
            acc += weights[:, i, j][None, :, None, None] * window
    acc += bias[None, :, None, None]
    return acc


def depthwise_conv_backward(
    grad_out: Tensor4, x: Tensor4, weights: np.ndarray, spec: ConvSpec
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients of depthwise_conv w.r.t. input, weights and bias."""
    check_tensor4(grad_out, "depthwise_conv_backward: grad_out")
    check_tensor4(x, "depthwise_conv_backward: x")
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"depthwise_conv_backward: grad_out {grad_out.shape} != x {x.shape}"
        )
    n, c, h, w = x.shape
    if weights.shape != (c, spec.kernel, spec.kernel):
        raise ShapeError(f"depthwise_conv_backward: weights shape {weights.shape} invalid")
    d, pad = spec.dilation, spec.padding
    xp = _pad2d(x, pad)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weights)
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            window = xp[:, :, i * d : i * d + h, j * d : j * d + w]
            grad_w[:, i, j] = (grad_out * window).sum(axis=(0, 2, 3))
            grad_xp[:, :, i * d : i * d + h, j * d : j * d + w] += (
                weights[:, i, j][None, :, None, None] * grad_out
            )
    grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# dense (channel-mixing) convolution
# ---------------------------------------------------------------------------
# Exists as plumbing for the stem, the between-stage downsamplers and the
# 2->N selection conv; it is not a general-purpose strided-conv API.

def conv2d(
    x: Tensor4,
    weights: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> Tensor4:
    """Dense convolution: weights (c_out, c_in, k, k), square kernel, stride >= 1."""
    check_tensor4(x, "conv2d: x")
    n, c, h, w = x.shape
    if weights.ndim != 4 or weights.shape[1] != c or weights.shape[2] != weights.shape[3]:
        raise ShapeError(
            f"conv2d: weights shape {weights.shape} does not match input channels {c}"
        )
    c_out, _, k, _ = weights.shape
    _check_vector(bias, c_out, "conv2d: bias")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")
    xp = _pad2d(x, padding)
    acc = np.zeros((n, c_out, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            window = xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            acc += np.einsum("oc,nchw->nohw", weights[:, :, i, j], window)
    acc += bias[None, :, None, None]
    return acc


def conv2d_backward(
    grad_out: Tensor4,
    x: Tensor4,
    weights: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input, weights and bias."""
    check_tensor4(grad_out, "conv2d_backward: grad_out")
    check_tensor4(x, "conv2d_backward: x")
    n, c, h, w = x.shape
    c_out, _, k, _ = weights.shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    expected = ((h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1)
    if grad_out.shape != (n, c_out, *expected):
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} != expected {(n, c_out, *expected)}"
        )
    xp = _pad2d(x, padding)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weights)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * (oh - 1) + 1, stride)
            cols = slice(j, j + stride * (ow - 1) + 1, stride)
            window = xp[:, :, rows, cols]
            grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", grad_out, window)
            grad_xp[:, :, rows, cols] += np.einsum("oc,nohw->nchw", weights[:, :, i, j], grad_out)
    grad_x = grad_xp[:, :, padding : padding + h, padding : padding + w] if padding else grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# point-wise (1x1) convolution
# ---------------------------------------------------------------------------

def pointwise_conv(x: Tensor4, weights: np.ndarray, bias: np.ndarray) -> Tensor4:
    """1x1 convolution: pure per-pixel channel mixing with weights (c_out, c_in)."""
    check_tensor4(x, "pointwise_conv: x")
    n, c, h, w = x.shape
    if weights.ndim != 2 or weights.shape[1] != c:
        raise ShapeError(
            f"pointwise_conv: weights shape {weights.shape} does not match input channels {c}"
        )
    c_out = weights.shape[0]
    _check_vector(bias, c_out, "pointwise_conv: bias")
    out = np.einsum("oc,nchw->nohw", weights, x)
    out += bias[None, :, None, None]
    return out


def pointwise_conv_backward(
    grad_out: Tensor4, x: Tensor4, weights: np.ndarray
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    check_tensor4(grad_out, "pointwise_conv_backward: grad_out")
    check_tensor4(x, "pointwise_conv_backward: x")
    if grad_out.shape[0] != x.shape[0] or grad_out.shape[2:] != x.shape[2:]:
        raise ShapeError(
            f"pointwise_conv_backward: grad_out {grad_out.shape} inconsistent with x {x.shape}"
        )
    if weights.shape != (grad_out.shape[1], x.shape[1]):
        raise ShapeError(f"pointwise_conv_backward: weights shape {weights.shape} invalid")
    grad_x = np.einsum("oc,nohw->nchw", weights, grad_out)
    grad_w = np.einsum("nohw,nchw->oc", grad_out, x)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# channel pooling (the spatial-descriptor step)
# ---------------------------------------------------------------------------

def channel_pool(x: Tensor4, mode: str) -> Tensor4:
    """Collapse channels to a single (n,1,h,w) map: arithmetic mean or maximum."""
    check_tensor4(x, "channel_pool: x")
    if mode == "avg":
        return x.mean(axis=1, keepdims=True)
    if mode == "max":
        return x.max(axis=1, keepdims=True)
    raise ShapeError(f"channel_pool: unknown mode {mode!r} (want 'avg' or 'max')")


def channel_pool_backward(grad_out: Tensor4, x: Tensor4, mode: str) -> Tensor4:
    """Backward of channel_pool.

    Max pooling routes the gradient to the lowest-index channel attaining the
    maximum, so ties resolve deterministically.
    """
    check_tensor4(grad_out, "channel_pool_backward: grad_out")
    check_tensor4(x, "channel_pool_backward: x")
    n, c, h, w = x.shape
    if grad_out.shape != (n, 1, h, w):
        raise ShapeError(
            f"channel_pool_backward: grad_out {grad_out.shape} != expected {(n, 1, h, w)}"
        )
    if mode == "avg":
        return (np.broadcast_to(grad_out, x.shape) / x.dtype.type(c)).astype(x.dtype, copy=True)
    if mode == "max":
        winner = np.argmax(x, axis=1)  # first occurrence wins
        grad_x = np.zeros_like(x)
        np.put_along_axis(grad_x, winner[:, None, :, :], grad_out, axis=1)
        return grad_x
    raise ShapeError(f"channel_pool_backward: unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# element-wise operations
# ---------------------------------------------------------------------------

def elementwise(a: Tensor4, b: Tensor4, op: str) -> Tensor4:
    """Element-wise 'mul' or 'add' of two identically shaped tensors."""
    check_tensor4(a, "elementwise: a")
    check_tensor4(b, "elementwise: b")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise: shape mismatch {a.shape} vs {b.shape}")
    if op == "mul":
        return a * b
    if op == "add":
        return a + b
    raise ShapeError(f"elementwise: unknown op {op!r} (want 'mul' or 'add')")


def elementwise_backward(
    grad_out: Tensor4, a: Tensor4, b: Tensor4, op: str
) -> tuple[Tensor4, Tensor4]:
    if grad_out.shape != a.shape or a.shape != b.shape:
        raise ShapeError(
            f"elementwise_backward: shapes {grad_out.shape}, {a.shape}, {b.shape} must match"
        )
    if op == "mul":
        return grad_out * b, grad_out * a
    if op == "add":
        return grad_out.copy(), grad_out.copy()
    raise ShapeError(f"elementwise_backward: unknown op {op!r}")


def sigmoid(x: Tensor4) -> Tensor4:
    """Numerically stable logistic function; sigmoid(0) is exactly 0.5."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out: Tensor4, y: Tensor4) -> Tensor4:
    """Backward of sigmoid given its saved output ``y``."""
    if grad_out.shape != y.shape:
        raise ShapeError(f"sigmoid_backward: shape mismatch {grad_out.shape} vs {y.shape}")
    return grad_out * y * (1.0 - y)


def gelu(x: Tensor4) -> Tensor4:
    """GELU in the tanh approximation: 0.5*x*(1 + tanh(s*(x + 0.044715*x^3)))."""
    inner = _GELU_SCALE * (x + _GELU_COEFF * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(grad_out: Tensor4, x: Tensor4) -> Tensor4:
    if grad_out.shape != x.shape:
        raise ShapeError(f"gelu_backward: shape mismatch {grad_out.shape} vs {x.shape}")
    inner = _GELU_SCALE * (x + _GELU_COEFF * x * x * x)
    t = np.tanh(inner)
    d_inner = _GELU_SCALE * (1.0 + 3.0 * _GELU_COEFF * x * x)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)


def concat_channels(parts: Sequence[Tensor4]) -> Tensor4:
    """Concatenate along the channel axis; batch and spatial dims must agree."""
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    first = check_tensor4(parts[0], "concat_channels: parts[0]")
    for idx, p in enumerate(parts[1:], start=1):
        check_tensor4(p, f"concat_channels: parts[{idx}]")
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: parts[{idx}] shape {p.shape} does not match {first.shape}"
            )
    return np.concatenate(parts, axis=1)


def concat_channels_backward(grad_out: Tensor4, channel_sizes: Iterable[int]) -> list[Tensor4]:
    sizes = list(channel_sizes)
    if sum(sizes) != grad_out.shape[1]:
        raise ShapeError(
            f"concat_channels_backward: sizes {sizes} do not sum to {grad_out.shape[1]} channels"
        )
    grads, start = [], 0
    for s in sizes:
        grads.append(np.ascontiguousarray(grad_out[:, start : start + s]))
        start += s
    return grads


def broadcast_mask_mul(x: Tensor4, mask: Tensor4) -> Tensor4:
    """Scale every channel of ``x`` by a single-channel spatial mask.

    This is the one sanctioned broadcast in the library (mask weighting of a
    branch, where the mask is (n,1,h,w)); it is explicit so that elementwise()
    can keep rejecting shape mismatches.
    """
    check_tensor4(x, "broadcast_mask_mul: x")
    check_tensor4(mask, "broadcast_mask_mul: mask")
    n, _, h, w = x.shape
    if mask.shape != (n, 1, h, w):
        raise ShapeError(
            f"broadcast_mask_mul: mask shape {mask.shape} != expected {(n, 1, h, w)}"
        )
    return x * mask


def broadcast_mask_mul_backward(
    grad_out: Tensor4, x: Tensor4, mask: Tensor4
) -> tuple[Tensor4, Tensor4]:
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"broadcast_mask_mul_backward: grad_out {grad_out.shape} != x {x.shape}"
        )
    grad_x = grad_out * mask
    grad_mask = (grad_out * x).sum(axis=1, keepdims=True)
    return grad_x, grad_mask


def channel_scale(x: Tensor4, scale: np.ndarray) -> Tensor4:
    """Multiply each channel by a learnable scalar (residual-branch scaling)."""
    check_tensor4(x, "channel_scale: x")
    _check_vector(scale, x.shape[1], "channel_scale: scale")
    return x * scale[None, :, None, None]


def channel_scale_backward(
    grad_out: Tensor4, x: Tensor4, scale: np.ndarray
) -> tuple[Tensor4, np.ndarray]:
    if grad_out.shape != x.shape:
        raise ShapeError(f"channel_scale_backward: grad_out {grad_out.shape} != x {x.shape}")
    grad_x = grad_out * scale[None, :, None, None]
    grad_scale = (grad_out * x).sum(axis=(0, 2, 3))
    return grad_x, grad_scale


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def affine_channel_norm(
    x: Tensor4,
    scale: np.ndarray,
    shift: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor4:
    """Per-channel affine normalization with externally supplied statistics.

    y = scale * (x - mean) / sqrt(var + eps) + shift, per channel.  With
    mean 0, var 1, scale 1, shift 0 and eps 0 this is the identity.
    """
    check_tensor4(x, "affine_channel_norm: x")
    c = x.shape[1]
    for name, v in (("scale", scale), ("shift", shift), ("mean", mean), ("var", var)):
        _check_vector(v, c, f"affine_channel_norm: {name}")
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * (scale * inv)[None, :, None, None] + shift[
        None, :, None, None
    ]


def affine_channel_norm_backward(
    grad_out: Tensor4,
    x: Tensor4,
    scale: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float = 1e-5,
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients w.r.t. x, scale and shift.  mean/var are stored statistics
    and treated as constants."""
    if grad_out.shape != x.shape:
        raise ShapeError(
            f"affine_channel_norm_backward: grad_out {grad_out.shape} != x {x.shape}"
        )
    inv = 1.0 / np.sqrt(var + eps)
    grad_x = grad_out * (scale * inv)[None, :, None, None]
    centered = x - mean[None, :, None, None]
    grad_scale = (grad_out * centered * inv[None, :, None, None]).sum(axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_scale, grad_shift


def batch_norm(
    x: Tensor4, scale: np.ndarray, shift: np.ndarray, eps: float = 1e-5
) -> tuple[Tensor4, Tensor4, np.ndarray]:
    """Training-mode normalization using the batch's own per-channel statistics.

    Returns (y, x_hat, inv_std); the latter two feed batch_norm_backward.
    Variance is the biased estimate over batch and space.
    """
    check_tensor4(x, "batch_norm: x")
    c = x.shape[1]
    _check_vector(scale, c, "batch_norm: scale")
    _check_vector(shift, c, "batch_norm: shift")
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = x_hat * scale[None, :, None, None] + shift[None, :, None, None]
    return y, x_hat, inv_std


def batch_norm_backward(
    grad_out: Tensor4, x_hat: Tensor4, inv_std: np.ndarray, scale: np.ndarray
) -> tuple[Tensor4, np.ndarray, np.ndarray]:
    """Gradients w.r.t. x, scale and shift, with gradient flowing through the
    batch statistics."""
    if grad_out.shape != x_hat.shape:
        raise ShapeError(
            f"batch_norm_backward: grad_out {grad_out.shape} != x_hat {x_hat.shape}"
        )
    n, _, h, w = grad_out.shape
    m = n * h * w
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    grad_scale = (grad_out * x_hat).sum(axis=(0, 2, 3))
    g_hat = grad_out * scale[None, :, None, None]
    sum_g = g_hat.sum(axis=(0, 2, 3), keepdims=True)
    sum_gx = (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
    grad_x = (inv_std[None, :, None, None] / m) * (m * g_hat - sum_g - x_hat * sum_gx)
    return grad_x, grad_scale, grad_shift


def global_avg_pool(x: Tensor4) -> Tensor4:
    """Spatial mean per channel, keeping (n, c, 1, 1) layout."""
    check_tensor4(x, "global_avg_pool: x")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: Tensor4, x: Tensor4) -> Tensor4:
    n, c, h, w = x.shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(
            f"global_avg_pool_backward: grad_out {grad_out.shape} != expected {(n, c, 1, 1)}"
        )
    return (np.broadcast_to(grad_out, x.shape) / x.dtype.type(h * w)).astype(x.dtype, copy=True)
