"""Trainable monotone retention masks over singular-value indices.

A mask of length r is driven by D simplex-constrained weights alpha
(via softmax of an unconstrained theta). A staircase matrix maps alpha to
a per-index retention probability p that is non-increasing by construction
and always keeps the leading singular value (p[0] = 1). The per-layer
compression ratio follows from sum(p); the forward pass uses a hard prefix
mask derived from that ratio, coupled to p with a straight-through
estimator so gradients reach theta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InputError

# Guards one-ulp rounding when a ratio*length product is an exact integer
# in real arithmetic; floor semantics otherwise.
FLOOR_GUARD = 1e-9


@dataclass(frozen=True)
class StaircaseMap:
    """Column one-counts of the D x r staircase mapping matrix.

    counts[i] = D - floor(i*D/r) (0-based i), so counts is non-increasing,
    starts at D and ends at 1 whenever D <= r: the first index sums the whole
    simplex and the last index receives only the final weight.
    """

    steps: int
    length: int
    counts: np.ndarray

    def matrix(self) -> np.ndarray:
        """Materialize the 0/1 mapping matrix (steps x length)."""
        rows = np.arange(self.steps)[:, None]
        return (rows >= self.steps - self.counts[None, :]).astype(np.float64)


def build_staircase(steps: int, length: int) -> StaircaseMap:
    if steps < 1 or length < 1:
        raise InputError("steps and length must be positive")
    if steps > length:
        raise InputError(f"steps ({steps}) cannot exceed mask length ({length}); "
                         "clamp steps to the layer's singular-value count")
    i = np.arange(length, dtype=np.int64)
    counts = steps - (i * steps) // length
    return StaircaseMap(steps=steps, length=length, counts=counts)


def probability_mask(alpha: np.ndarray, smap: StaircaseMap) -> np.ndarray:
    """p[i] = sum of the trailing counts[i] entries of alpha."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if alpha.size != smap.steps:
        raise InputError(f"alpha length {alpha.size} != steps {smap.steps}")
    suffix = np.concatenate([np.cumsum(alpha[::-1])[::-1], [0.0]])
    return suffix[smap.steps - smap.counts]


def module_ratio(p: np.ndarray, rows: int, cols: int) -> float:
    """Parameter ratio of the masked factorization vs the dense matrix."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    return float(p.sum() * (rows + cols) / (rows * cols))


def kept_rank(ratio: float, length: int) -> int:
    """floor(ratio * length), capped to [0, length]."""
    if ratio < 0:
        raise InputError("ratio must be nonnegative")
    return min(int(math.floor(ratio * length + FLOOR_GUARD)), length)


def binarize(ratio: float, length: int) -> np.ndarray:
    """Hard prefix mask with kept_rank(ratio, length) leading ones."""
    ones = kept_rank(ratio, length)
    mask = np.zeros(length)
    mask[:ones] = 1.0
    return mask


def break_even_rank(rows: int, cols: int) -> float:
    """Rank at which the factor pair costs exactly as much as the dense matrix.

    This is also the mask length at which the maximum compression ratio is 1;
    the trainable mask spans more indices than this so the ratio can exceed 1,
    but hard-mask rank counts are denominated in these units to keep the
    binarized cost equal to the ratio's parameter budget.
    """
    return rows * cols / (rows + cols)


def budget_rank(ratio: float, rows: int, cols: int, cap: int) -> int:
    """Kept rank worth ratio's parameter budget: floor(ratio * break-even rank).

    Equal to floor(sum(p)) when ratio comes from a probability mask over
    these dimensions. Clamped to [0, cap].
    """
    if ratio < 0:
        raise InputError("ratio must be nonnegative")
    raw = int(math.floor(ratio * break_even_rank(rows, cols) + FLOOR_GUARD))
    return max(0, min(raw, cap))


def prefix_mask(ones: int, length: int) -> np.ndarray:
    mask = np.zeros(length)
    mask[:min(ones, length)] = 1.0
    return mask


def ste_apply(prob: ad.Node, binary: np.ndarray) -> ad.Node:
    """Forward the binary mask, route its gradient into the probability mask."""
    return ad.straight_through(prob, np.asarray(binary, dtype=np.float64).reshape(1, -1))


class RankMask:
    """Per-layer trainable mask state: theta plus its derived quantities.

    ``steps`` is clamped to the mask length by the caller (recorded in run
    reports); theta starts at zero so alpha is uniform and p is a linear
    ramp covering the whole spectrum.
    """

    def __init__(self, steps: int, length: int, rows: int, cols: int):
        self.smap = build_staircase(steps, length)
        self.rows = int(rows)
        self.cols = int(cols)
        self.theta = ad.param(np.zeros((1, steps)))
        self._matrix = ad.const(self.smap.matrix())

    @property
    def length(self) -> int:
        return self.smap.length

    @property
    def ratio_scale(self) -> float:
        return (self.rows + self.cols) / (self.rows * self.cols)

    def prob_node(self) -> ad.Node:
        """Differentiable p = softmax(theta) @ staircase matrix, shape (1, r)."""
        return ad.matmul(ad.softmax_rows(self.theta), self._matrix)

    def ratio_node(self, prob: ad.Node) -> ad.Node:
        """Differentiable compression ratio, shape (1, 1)."""
        return ad.scale(ad.sum_all(prob), self.ratio_scale)

    # -- numeric snapshots (no tape) -----------------------------------

    def alpha_values(self) -> np.ndarray:
        t = self.theta.value[0]
        e = np.exp(t - t.max())
        return e / e.sum()

    def prob_values(self) -> np.ndarray:
        return probability_mask(self.alpha_values(), self.smap)

    def ratio_value(self) -> float:
        return module_ratio(self.prob_values(), self.rows, self.cols)

    def binary_values(self) -> np.ndarray:
        kept = budget_rank(self.ratio_value(), self.rows, self.cols, self.length)
        return prefix_mask(kept, self.length)
