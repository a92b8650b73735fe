"""Toy gradient-descent training used to validate the backward passes.

Three scopes, all full-batch plain gradient descent on the mean-squared error
of a scalar linear head over globally pooled features:

* ``head``     - features come from a frozen random selection module; only the
                 head trains (a convex problem, used for descent checks).
* ``module``   - one selection module plus the head train end to end; the
                 default smoke test overfits 8 synthetic samples.
* ``backbone`` - a small four-stage backbone trains end to end with
                 batch-statistics normalization, head on pooled stage-4
                 features.

A non-finite loss raises :class:`DivergenceError` carrying the step index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .backbone import (
    BackboneConfig,
    backbone_backward,
    backbone_forward,
    init_backbone_params,
    named_arrays,
)
from .errors import DivergenceError, ShapeError
from .module import init_lsk_params, lsk_backward, lsk_forward
from .plan import validate_plan

__all__ = ["ToyProblem", "make_synthetic_dataset", "toy_train", "DEFAULT_LR", "DEFAULT_STEPS"]

DEFAULT_STEPS = 500
DEFAULT_LR = 0.5
MODULE_CHANNELS = 8
MODULE_SIZE = 8
MODULE_PLAN = ((3, 1), (5, 2))
MAX_SAMPLES = 16


@dataclass
class ToyProblem:
    inputs: np.ndarray  # (m, c, h, w) float32
    targets: np.ndarray  # (m,) float32


def make_synthetic_dataset(
    n_samples: int, channels: int, h: int, w: int, seed: int = 0
) -> ToyProblem:
    """Random inputs with random scalar targets; capped at 16 samples."""
    if n_samples < 1 or n_samples > MAX_SAMPLES:
        raise ShapeError(f"toy datasets hold 1..{MAX_SAMPLES} samples, got {n_samples}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, channels, h, w)).astype(np.float32)
    t = rng.uniform(0.2, 0.8, size=n_samples).astype(np.float32)
    return ToyProblem(inputs=x, targets=t)


def _mse(pred: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean((pred - targets) ** 2))


def _check_finite(loss: float, step: int) -> None:
    if not np.isfinite(loss):
        raise DivergenceError(step)


def toy_train(
    steps: int = DEFAULT_STEPS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    scope: str = "module",
    n_samples: int = 8,
    config: BackboneConfig | None = None,
    dataset: ToyProblem | None = None,
) -> list[float]:
    """Run plain gradient descent; returns the loss trajectory.

    ``losses[k]`` is the loss after ``k`` updates, so the list holds
    ``steps + 1`` values and ``losses[-1]`` is the final loss.
    """
    if scope == "module":
        return _train_module(steps, lr, seed, n_samples, dataset, train_module=True)
    if scope == "head":
        return _train_module(steps, lr, seed, n_samples, dataset, train_module=False)
    if scope == "backbone":
        return _train_backbone(steps, lr, seed, n_samples, config, dataset)
    raise ShapeError(f"toy_train: unknown scope {scope!r} (want head|module|backbone)")


def _train_module(
    steps: int,
    lr: float,
    seed: int,
    n_samples: int,
    dataset: ToyProblem | None,
    train_module: bool,
) -> list[float]:
    rng = np.random.default_rng(seed)
    plan = validate_plan(MODULE_PLAN)
    params = init_lsk_params(plan, MODULE_CHANNELS, rng=rng)
    if dataset is None:
        dataset = make_synthetic_dataset(n_samples, MODULE_CHANNELS, MODULE_SIZE, MODULE_SIZE, seed)
    x, targets = dataset.inputs, dataset.targets
    m = x.shape[0]
    head_w = rng.uniform(-0.3, 0.3, size=MODULE_CHANNELS).astype(np.float32)
    head_b = np.zeros(1, dtype=np.float32)

    if not train_module:
        frozen = lsk_forward(x, params, keep_state=False)
        frozen_pooled = ops.global_avg_pool(frozen.y)[:, :, 0, 0]

    losses: list[float] = []
    for step in range(steps + 1):
        if train_module:
            out = lsk_forward(x, params)
            pooled = ops.global_avg_pool(out.y)[:, :, 0, 0]
        else:
            pooled = frozen_pooled
        pred = pooled @ head_w + head_b[0]
        loss = _mse(pred, targets)
        _check_finite(loss, step)
        losses.append(loss)
        if step == steps:
            break

        grad_pred = (2.0 / m) * (pred - targets)
        grad_w = pooled.T @ grad_pred
        grad_b = grad_pred.sum()
        if train_module:
            grad_pooled = np.outer(grad_pred, head_w).astype(x.dtype)
            grad_y = ops.global_avg_pool_backward(grad_pooled[:, :, None, None], out.y)
            grads = lsk_backward(grad_y, out.state)
            updates = list(zip(params.dw_weights, grads.dw_weights))
            updates += list(zip(params.dw_biases, grads.dw_biases))
            updates += list(zip(params.mix_weights, grads.mix_weights))
            updates += list(zip(params.mix_biases, grads.mix_biases))
            updates += [
                (params.select_weight, grads.select_weight),
                (params.select_bias, grads.select_bias),
                (params.fuse_weight, grads.fuse_weight),
                (params.fuse_bias, grads.fuse_bias),
            ]
            for arr, g in updates:
                arr -= (lr * g).astype(arr.dtype)
        head_w -= (lr * grad_w).astype(head_w.dtype)
        head_b -= np.float32(lr * grad_b)
    return losses


def _train_backbone(
    steps: int,
    lr: float,
    seed: int,
    n_samples: int,
    config: BackboneConfig | None,
    dataset: ToyProblem | None,
) -> list[float]:
    if config is None:
        config = BackboneConfig(
            channels=(4, 4, 8, 8), depths=(1, 1, 1, 1), ffn_ratios=(2.0, 2.0, 2.0, 2.0)
        )
    rng = np.random.default_rng(seed)
    params = init_backbone_params(config, seed=seed)
    if dataset is None:
        dataset = make_synthetic_dataset(min(n_samples, 4), 3, 32, 32, seed)
    x, targets = dataset.inputs, dataset.targets
    m = x.shape[0]
    head_w = rng.uniform(-0.3, 0.3, size=config.channels[3]).astype(np.float32)
    head_b = np.zeros(1, dtype=np.float32)
    arrays = named_arrays(params)

    losses: list[float] = []
    for step in range(steps + 1):
        out = backbone_forward(x, params, keep_state=True, train_norm=True)
        feat = out.features[3]
        pooled = ops.global_avg_pool(feat)[:, :, 0, 0]
        pred = pooled @ head_w + head_b[0]
        loss = _mse(pred, targets)
        _check_finite(loss, step)
        losses.append(loss)
        if step == steps:
            break

        grad_pred = (2.0 / m) * (pred - targets)
        grad_w = pooled.T @ grad_pred
        grad_b = grad_pred.sum()
        grad_pooled = np.outer(grad_pred, head_w).astype(x.dtype)
        grad_feat = ops.global_avg_pool_backward(grad_pooled[:, :, None, None], feat)
        _, grads = backbone_backward(grad_feat, out.state)
        for name, g in grads.items():
            arrays[name] -= (lr * g).astype(arrays[name].dtype)
        head_w -= (lr * grad_w).astype(head_w.dtype)
        head_b -= np.float32(lr * grad_b)
    return losses
