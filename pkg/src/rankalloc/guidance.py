"""Full-rank guidance: when does compressing a module pay for itself?

The capacity a rank-floor(R*r) truncation preserves is measured against the
whitened spectrum; modules whose preserved capacity does not exceed their
parameter cost are nudged toward ratio 1 (i.e. toward keeping the dense
matrix) by a hinge-style loss. The forward computation switches between the
dense weight and the masked factor product purely on the current ratio,
re-evaluated every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .factorization import WhitenedFactorization, truncate, truncation_loss
from .masks import RankMask, budget_rank, prefix_mask, ste_apply

MODE_DENSE = "dense"
MODE_LOW_RANK = "low-rank"


@dataclass(frozen=True)
class GuidanceEval:
    """Per-layer snapshot appended to the step log."""

    preserved: float          # fraction of whitened output norm kept, in [0, 1]
    loss: float
    mode: str
    ratio: float
    degenerate: bool = False  # all-zero layer: preserved is defined as 1


def capacity_at_rank(fact: WhitenedFactorization, kept: int) -> tuple[float, bool]:
    """(preserved fraction, degenerate flag) keeping the top ``kept`` values."""
    total = truncation_loss(fact, 0)
    if total == 0.0:
        return 1.0, True
    kept = max(0, min(kept, fact.max_rank))
    return (total - truncation_loss(fact, kept)) / total, False


def capacity_preserved(fact: WhitenedFactorization, ratio: float) -> tuple[float, bool]:
    """Preserved fraction at the hard rank the ratio's parameter budget buys."""
    kept = budget_rank(max(ratio, 0.0), fact.rows, fact.cols, fact.max_rank)
    return capacity_at_rank(fact, kept)


def guidance_loss(preserved: float, ratio: float, clamp: bool = True) -> float:
    """0 when compression pays for itself (preserved > ratio), else 1 - ratio.

    The clamped form never goes negative for ratio > 1: the literal second
    branch would reward unbounded ratios, while its stated job is to pull
    modules to ratio 1. The literal form stays available via clamp=False.
    """
    if preserved > ratio:
        return 0.0
    if clamp:
        return 1.0 - min(ratio, 1.0)
    return 1.0 - ratio


def mode_for_ratio(ratio: float) -> str:
    return MODE_DENSE if ratio >= 1.0 else MODE_LOW_RANK


def evaluate_layer(fact: WhitenedFactorization, ratio: float,
                   clamp: bool = True) -> GuidanceEval:
    preserved, degenerate = capacity_preserved(fact, ratio)
    return GuidanceEval(preserved=preserved,
                        loss=guidance_loss(preserved, ratio, clamp),
                        mode=mode_for_ratio(ratio), ratio=ratio,
                        degenerate=degenerate)


def guidance_loss_node(preserved: float, ratio: float, ratio_node: ad.Node,
                       clamp: bool = True) -> ad.Node:
    """Differentiable guidance loss; the branch condition is frozen per step.

    In the active branch the value is 1 - R built on the differentiable
    ratio node, so the pull toward ratio 1 reaches theta even while the
    module's forward pass sits on the dense branch.
    """
    if preserved > ratio or (clamp and ratio >= 1.0):
        return ad.const([[0.0]])
    return ad.subtract(ad.const([[1.0]]), ratio_node)


@dataclass
class LayerStep:
    """Everything one layer contributes to one training step."""

    prob: ad.Node            # (1, r) differentiable retention probabilities
    ratio_node: ad.Node      # (1, 1) differentiable compression ratio
    ratio: float
    binary: np.ndarray
    eval: GuidanceEval
    guidance: ad.Node        # (1, 1)
    soft_count: ad.Node      # (1, 1) differentiable parameter count sum(p)*(m+n)
    realized_count: int      # logged cost: mn when dense, capped factored cost otherwise


class CompressibleLayer:
    """A linear module bundling its dense weight, factorization, and mask.

    The dense weight and the cached full-length factors are frozen; only the
    mask's theta trains. ``mask_steps`` is clamped to the available
    singular-value count (recorded via ``steps_clamped``).
    """

    def __init__(self, name: str, weight: np.ndarray, fact: WhitenedFactorization,
                 mask_steps: int, clamp_guidance: bool = True,
                 dense_switch: bool = True):
        self.name = name
        self.weight = np.asarray(weight, dtype=np.float64)
        self.fact = fact
        self.rows, self.cols = self.weight.shape
        steps = min(int(mask_steps), fact.max_rank)
        self.steps_clamped = steps < int(mask_steps)
        self.notes = ([f"{name}: mask steps clamped {mask_steps} -> {steps}"]
                      if self.steps_clamped else [])
        self.mask = RankMask(steps, fact.max_rank, self.rows, self.cols)
        self.clamp_guidance = bool(clamp_guidance)
        # the mask-mechanism ablation trains on the factored form only
        self.dense_switch = bool(dense_switch)
        full = truncate(fact, fact.max_rank)
        self._left = ad.const(full.left)
        self._right = ad.const(full.right)
        self._dense = ad.const(self.weight)

    @property
    def dense_count(self) -> int:
        return self.rows * self.cols

    @property
    def mask_length(self) -> int:
        return self.mask.length

    def trainables(self) -> list[ad.Node]:
        return [self.mask.theta]

    def current_ratio(self) -> float:
        return self.mask.ratio_value()

    def begin_step(self, rng=None) -> LayerStep:
        """Evaluate the mask pipeline once; reused by every forward in the step."""
        prob = self.mask.prob_node()
        ratio_node = self.mask.ratio_node(prob)
        ratio = float(ratio_node.value[0, 0])
        kept = budget_rank(ratio, self.rows, self.cols, self.mask.length)
        binary = prefix_mask(kept, self.mask.length)
        geval = evaluate_layer(self.fact, ratio, self.clamp_guidance)
        gnode = guidance_loss_node(geval.preserved, ratio, ratio_node,
                                   self.clamp_guidance)
        soft_count = ad.scale(ad.sum_all(prob), self.rows + self.cols)
        if ratio >= 1.0 and self.dense_switch:
            realized = self.dense_count
        else:
            realized = min(kept * (self.rows + self.cols), self.dense_count)
        return LayerStep(prob=prob, ratio_node=ratio_node, ratio=ratio,
                         binary=binary, eval=geval, guidance=gnode,
                         soft_count=soft_count, realized_count=realized)

    def effective_weight(self, step: LayerStep) -> ad.Node:
        """Dense weight at ratio >= 1, masked factor product below it."""
        if step.ratio >= 1.0 and self.dense_switch:
            return self._dense
        mask_node = ste_apply(step.prob, step.binary)
        return ad.matmul(ad.hadamard(self._left, mask_node), self._right)
