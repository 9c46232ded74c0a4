"""Comparison allocators: uniform truncation and two trained mask families.

The trained baselines (a scalar tanh cutoff per layer and independent
Gumbel-Sigmoid logits per index) run under the same loop, factorizations,
ratio penalty, STE coupling, seeding, and post-rescaling as the adaptive
method, with the guidance term removed and no dense/low-rank switch — only
the mask parameterization differs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .allocator import TrainConfig, TrainRun, _allocations, train_masks
from .errors import ConfigError, InputError
from .factorization import WhitenedFactorization, truncate
from .guidance import GuidanceEval, LayerStep, MODE_LOW_RANK
from .masks import budget_rank, module_ratio, prefix_mask, ste_apply
from .model import CalibrationSet, CompressibleModel

BASELINE_TAGS = ("uniform", "tanh", "gumbel")


@dataclass(frozen=True)
class BaselineKind:
    tag: str
    tanh_sharpness: float | None = None   # default 0.1 * mask length per layer
    gumbel_temperature: float = 1.0
    lr_override: float | None = None      # tanh moves a cutoff index, needs big steps

    def validate(self) -> "BaselineKind":
        if self.tag not in BASELINE_TAGS:
            raise ConfigError(f"unknown baseline {self.tag!r}; pick from {BASELINE_TAGS}")
        if self.tanh_sharpness is not None and self.tanh_sharpness <= 0:
            raise ConfigError("tanh sharpness must be positive")
        if self.gumbel_temperature <= 0:
            raise ConfigError("gumbel temperature must be positive")
        return self

    def effective_lr(self, cfg: TrainConfig) -> float:
        if self.lr_override is not None:
            return self.lr_override
        return 0.1 if self.tag == "tanh" else cfg.lr


def uniform_allocate(shapes: dict[str, tuple[int, int]], target: float
                     ) -> dict[str, int]:
    """Closed-form per-layer rank floor(target * mn / (m+n)), clamped to >= 1."""
    if not 0 < target <= 1:
        raise InputError(f"target must be in (0, 1], got {target}")
    ranks = {}
    for name, (rows, cols) in shapes.items():
        rank = int(np.floor(target * rows * cols / (rows + cols) + 1e-9))
        ranks[name] = max(rank, 1)
    return ranks


class _BaselineLayerBase:
    """Factorization-backed layer without the dense switch."""

    def __init__(self, name: str, weight: np.ndarray, fact: WhitenedFactorization):
        self.name = name
        self.weight = np.asarray(weight, dtype=np.float64)
        self.fact = fact
        self.rows, self.cols = self.weight.shape
        self.notes: list[str] = []
        full = truncate(fact, fact.max_rank)
        self._left = ad.const(full.left)
        self._right = ad.const(full.right)

    @property
    def dense_count(self) -> int:
        return self.rows * self.cols

    @property
    def mask_length(self) -> int:
        return self.fact.max_rank

    def soft_mask_node(self, rng) -> ad.Node:
        raise NotImplementedError

    def trainables(self) -> list[ad.Node]:
        raise NotImplementedError

    def current_ratio(self) -> float:
        raise NotImplementedError

    def begin_step(self, rng=None) -> LayerStep:
        prob = self.soft_mask_node(rng)
        scale = (self.rows + self.cols) / self.dense_count
        ratio_node = ad.scale(ad.sum_all(prob), scale)
        ratio = float(ratio_node.value[0, 0])
        kept = budget_rank(ratio, self.rows, self.cols, self.mask_length)
        binary = prefix_mask(kept, self.mask_length)
        geval = GuidanceEval(preserved=0.0, loss=0.0, mode=MODE_LOW_RANK, ratio=ratio)
        soft_count = ad.scale(ad.sum_all(prob), self.rows + self.cols)
        realized = min(kept * (self.rows + self.cols), self.dense_count)
        return LayerStep(prob=prob, ratio_node=ratio_node, ratio=ratio,
                         binary=binary, eval=geval, guidance=ad.const([[0.0]]),
                         soft_count=soft_count, realized_count=realized)

    def effective_weight(self, step: LayerStep) -> ad.Node:
        mask_node = ste_apply(step.prob, step.binary)
        return ad.matmul(ad.hadamard(self._left, mask_node), self._right)


class TanhMaskLayer(_BaselineLayerBase):
    """Soft cutoff mask 0.5*tanh(beta*(k - i)) + 0.5 with one trainable k."""

    def __init__(self, name, weight, fact, sharpness: float | None):
        super().__init__(name, weight, fact)
        self.sharpness = (0.1 * self.mask_length if sharpness is None
                          else float(sharpness))
        self.cutoff = ad.param([[self.mask_length / 2.0]])
        self._indices = ad.const(np.arange(1, self.mask_length + 1, dtype=np.float64))
        self.notes.append(f"{name}: tanh sharpness {self.sharpness:g}")

    def trainables(self) -> list[ad.Node]:
        return [self.cutoff]

    def soft_mask_node(self, rng=None) -> ad.Node:
        gap = ad.subtract(self.cutoff, self._indices)  # scalar broadcast to (1, r)
        return ad.add_scalar(ad.scale(ad.tanh(ad.scale(gap, self.sharpness)), 0.5), 0.5)

    def mask_values(self) -> np.ndarray:
        return self.soft_mask_node().value[0]

    def current_ratio(self) -> float:
        return module_ratio(self.mask_values(), self.rows, self.cols)


class GumbelMaskLayer(_BaselineLayerBase):
    """Independent relaxed-Bernoulli logits per index; no monotonicity."""

    def __init__(self, name, weight, fact, temperature: float):
        super().__init__(name, weight, fact)
        self.temperature = float(temperature)
        self.logits = ad.param(np.zeros((1, self.mask_length)))
        self._last_noise = np.zeros((1, self.mask_length))

    def trainables(self) -> list[ad.Node]:
        return [self.logits]

    def soft_mask_node(self, rng=None) -> ad.Node:
        if rng is not None:
            u = rng.uniform(1e-9, 1.0 - 1e-9, size=(1, self.mask_length))
            self._last_noise = np.log(u) - np.log1p(-u)
        shifted = ad.add(self.logits, ad.const(self._last_noise))
        return ad.sigmoid(ad.scale(shifted, 1.0 / self.temperature))

    def current_ratio(self) -> float:
        # deterministic accounting at zero noise for the final allocation
        p = ad.sigmoid(ad.scale(self.logits, 1.0 / self.temperature)).value[0]
        return module_ratio(p, self.rows, self.cols)


def build_baseline_layers(kind: BaselineKind, model: CompressibleModel,
                          calib: CalibrationSet, damping: float) -> list:
    from .allocator import layer_factorization
    layers = []
    for name in model.compressible_names():
        fact = layer_factorization(model, calib, name, damping)
        weight = model.weights[name].value
        if kind.tag == "tanh":
            layers.append(TanhMaskLayer(name, weight, fact, kind.tanh_sharpness))
        elif kind.tag == "gumbel":
            layers.append(GumbelMaskLayer(name, weight, fact, kind.gumbel_temperature))
        else:
            layers.append(_UniformLayer(name, weight, fact))
    return layers


class _UniformLayer(_BaselineLayerBase):
    def trainables(self):
        return []

    def current_ratio(self) -> float:
        return 1.0


def run_baseline(kind: BaselineKind, model: CompressibleModel,
                 calib: CalibrationSet, cfg: TrainConfig) -> tuple[TrainRun, list]:
    """Same TrainRun schema as the adaptive method, for like-for-like reports."""
    kind.validate()
    cfg.validate()
    layers = build_baseline_layers(kind, model, calib, cfg.damping)
    if kind.tag == "uniform":
        ranks = uniform_allocate(
            {l.name: (l.rows, l.cols) for l in layers}, cfg.target_ratio)
        capped = {l.name: min(ranks[l.name], l.mask_length) for l in layers}
        c_total = sum(l.dense_count for l in layers)
        realized = sum(capped[l.name] * (l.rows + l.cols) for l in layers) / c_total
        run = TrainRun(method="uniform", target_ratio=cfg.target_ratio, steps=[],
                       trained_ratios={l.name: capped[l.name] * (l.rows + l.cols)
                                       / l.dense_count for l in layers},
                       trained_modes={l.name: MODE_LOW_RANK for l in layers},
                       scale_factor=1.0,
                       allocations=_allocations(layers, capped),
                       realized_ratio=realized, seed=cfg.seed)
        return run, layers
    # trained baselines drop the guidance term entirely
    cfg_baseline = replace(cfg, lambda1=0.0)
    run = train_masks(model, calib, cfg_baseline, layers, method=kind.tag,
                      allow_dense=False, lr=kind.effective_lr(cfg))
    return run, layers
