"""Kernel-decomposition calculus for sequences of dilated depth-wise convs.

A plan is a sequence of (kernel size, dilation) pairs applied back to back.
The construction rules guarantee that the composed receptive field grows
quickly while no dilated kernel skips over pixels the previous stage has not
already covered:

    k[i-1] <= k[i]
    d[1] = 1,  d[i-1] < d[i] <= RF[i-1]

and the cumulative receptive field obeys

    RF[1] = k[1],  RF[i] = d[i] * (k[i] - 1) + RF[i-1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

from .errors import PlanError

__all__ = ["KernelSpec", "DecompositionPlan", "validate_plan", "enumerate_plans"]


@dataclass(frozen=True, order=True)
class KernelSpec:
    """One depth-wise stage: odd kernel size k >= 3 and dilation d >= 1."""

    k: int
    d: int

    def __post_init__(self):
        if self.k < 3 or self.k % 2 == 0:
            raise PlanError(f"kernel size must be an odd integer >= 3, got k={self.k}")
        if self.d < 1:
            raise PlanError(f"dilation must be an integer >= 1, got d={self.d}")

    @property
    def span(self) -> int:
        return self.d * (self.k - 1) + 1


@dataclass(frozen=True)
class DecompositionPlan:
    """A validated stage sequence plus its cumulative receptive fields."""

    stages: tuple[KernelSpec, ...]
    rf_per_stage: tuple[int, ...]

    @property
    def n_kernels(self) -> int:
        return len(self.stages)

    @property
    def rf(self) -> int:
        """Receptive field of the full sequence."""
        return self.rf_per_stage[-1]

    def sequence(self) -> tuple[tuple[int, int], ...]:
        return tuple((s.k, s.d) for s in self.stages)

    def __str__(self) -> str:
        return " -> ".join(f"({s.k},{s.d})" for s in self.stages)


def _as_specs(stages: Sequence[KernelSpec | tuple[int, int]]) -> list[KernelSpec]:
    return [s if isinstance(s, KernelSpec) else KernelSpec(*s) for s in stages]


def validate_plan(stages: Sequence[KernelSpec | tuple[int, int]]) -> DecompositionPlan:
    """Check the construction constraints and fill in receptive fields.

    Raises :class:`PlanError` naming the first violated inequality.
    """
    specs = _as_specs(stages)
    if not specs:
        raise PlanError("a decomposition plan needs at least one stage")
    if specs[0].d != 1:
        raise PlanError(f"d_1 must be 1, got d_1={specs[0].d}")
    rf = [specs[0].k]
    for i in range(1, len(specs)):
        prev, cur = specs[i - 1], specs[i]
        if cur.k < prev.k:
            raise PlanError(
                f"kernel sizes must be non-decreasing: k_{i + 1}={cur.k} < k_{i}={prev.k}"
            )
        if cur.d <= prev.d:
            raise PlanError(
                f"dilations must be strictly increasing: d_{i + 1}={cur.d} <= d_{i}={prev.d}"
            )
        if cur.d > rf[-1]:
            raise PlanError(
                f"d_{i + 1}={cur.d} > RF_{i}={rf[-1]}: dilation would skip uncovered pixels"
            )
        rf.append(cur.d * (cur.k - 1) + rf[-1])
    return DecompositionPlan(stages=tuple(specs), rf_per_stage=tuple(rf))


def _extend(
    seq: list[KernelSpec], rf: int, target: int, max_stages: int, max_k: int
) -> Iterator[tuple[KernelSpec, ...]]:
    if rf == target:
        yield tuple(seq)
        # a longer sequence cannot keep RF constant, so stop here
        return
    if len(seq) == max_stages:
        return
    for k in range(seq[-1].k, max_k + 1, 2):
        for d in range(seq[-1].d + 1, rf + 1):
            gain = d * (k - 1)
            if rf + gain > target:
                break
            seq.append(KernelSpec(k, d))
            yield from _extend(seq, rf + gain, target, max_stages, max_k)
            seq.pop()


def enumerate_plans(target_rf: int, max_stages: int, max_k: int) -> list[DecompositionPlan]:
    """All valid plans whose final receptive field is exactly ``target_rf``.

    Results are sorted by the parameter cost of the full selection module the
    plan would drive (computed at the reference width of 64 channels), with
    ties broken lexicographically by the (k, d) sequence.  An infeasible
    target yields an empty list, not an error.
    """
    if target_rf < 1:
        raise PlanError(f"target receptive field must be >= 1, got {target_rf}")
    if max_stages < 1 or max_k < 3:
        return []
    from .cost import cost_plan  # deferred: cost depends on plan types

    found: list[tuple[int, tuple[tuple[int, int], ...], DecompositionPlan]] = []
    for k in range(3, max_k + 1, 2):
        if k > target_rf:
            break
        for seq in _extend([KernelSpec(k, 1)], k, target_rf, max_stages, max_k):
            plan = validate_plan(seq)
            params = cost_plan(plan, c=64, c_mid=32, h=1, w=1).params
            found.append((params, plan.sequence(), plan))
    found.sort(key=lambda t: (t[0], t[1]))
    return [plan for _, _, plan in found]
