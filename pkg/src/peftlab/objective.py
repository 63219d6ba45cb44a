"""Composite training objective.

    total = task + lam * align + beta * reg

where task is mean cross-entropy, align pulls pooled features of parallel
source/target inputs together, and reg anchors the trainable parameters to
their values at transfer start. All three terms are per-batch means, so the
weights mean the same thing at any batch size.

Terms with a zero weight are left out of the graph entirely, not multiplied
by zero: a lam = 0 run is bit-identical to one that never computes
alignment, which the experiment harness relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import tensor as T
from .model import AdaptedModel
from .peft import ConfigError, FreezePlan
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    beta: float = 0.01

    def __post_init__(self):
        if self.lam < 0 or self.beta < 0:
            raise ConfigError(f"loss weights must be non-negative, got lam={self.lam}, beta={self.beta}")


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    align: float
    reg: float
    total: float


class SnapshotError(KeyError):
    pass


class ThetaSnapshot:
    """Copied values of the trainable parameters at transfer start."""

    def __init__(self, values: dict[str, np.ndarray]):
        self._values = MappingProxyType({k: v.copy() for k, v in values.items()})

    @classmethod
    def capture(cls, model: AdaptedModel, plan: FreezePlan) -> "ThetaSnapshot":
        plan.validate(model)
        registry = model.parameters()
        return cls({name: registry[name].data for name in plan.names})

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError:
            raise SnapshotError(f"no snapshot entry for parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self):
        return set(self._values)


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of a logits batch against integer labels."""
    return T.cross_entropy_logits(logits, labels)


def span_loss(start_logits: Tensor, end_logits: Tensor, span: tuple[int, int]) -> Tensor:
    """Mean of start and end cross-entropies for one example."""
    n = start_logits.shape[0]
    s, e = span
    if not (0 <= s < n and 0 <= e < n):
        raise ValueError(f"span {span} out of range for {n} positions")
    loss_s = T.cross_entropy_logits(T.reshape(start_logits, (1, n)), [s])
    loss_e = T.cross_entropy_logits(T.reshape(end_logits, (1, n)), [e])
    return T.scale(T.add(loss_s, loss_e), 0.5)


def alignment_loss(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Squared Euclidean distance between two pooled features."""
    if f_s.shape != f_t.shape:
        raise ShapeError(f"feature widths disagree: {f_s.shape} vs {f_t.shape}")
    return T.sum_squares(T.sub(f_s, f_t))


def batch_alignment_loss(feature_pairs) -> Tensor:
    """Mean per-pair alignment loss over a batch of parallel features."""
    losses = [alignment_loss(f_s, f_t) for f_s, f_t in feature_pairs]
    if not losses:
        raise ValueError("batch_alignment_loss: no pairs")
    return T.mean_scalars(losses)


def sp_regularizer(model: AdaptedModel, plan: FreezePlan, snapshot: ThetaSnapshot) -> Tensor:
    """Sum of squared deviations of planned parameters from their snapshot.

    Scope is the trainable plan only: frozen parameters cannot move, so
    their contribution would be identically zero.
    """
    registry = model.parameters()
    total = None
    for name in sorted(plan.names):
        anchor = Tensor(snapshot[name])
        term = T.sum_squares(T.sub(registry[name], anchor))
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(0.0)
    return total


def total_loss(task: Tensor, align: Tensor | None, reg: Tensor | None,
               weights: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the loss terms plus its detached breakdown.

    align/reg may be None when unused (no parallel pairs in the batch, or a
    zero weight); a zero-weight term is skipped rather than scaled by 0 and
    reported as 0.0 in the breakdown.
    """
    total = task
    align_val = 0.0
    reg_val = 0.0
    if weights.lam > 0 and align is not None:
        align_val = align.item()
        total = T.add(total, T.scale(align, weights.lam))
    if weights.beta > 0 and reg is not None:
        reg_val = reg.item()
        total = T.add(total, T.scale(reg, weights.beta))
    breakdown = LossBreakdown(
        task=task.item(), align=align_val, reg=reg_val, total=total.item()
    )
    return total, breakdown
