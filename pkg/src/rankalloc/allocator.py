"""Joint mask training, post-training rescaling, and model materialization.

Training minimizes CE + lambda1 * mean guidance + lambda2 * (soft ratio -
target)^2 over the per-layer mask parameters only; the backbone stays
frozen. The soft ratio term uses the differentiable probabilistic parameter
count sum(p)*(m+n); realized (floored, mode-aware) counts are logged each
step and reconciled against the target by one proportional rescale at the
end. The two currencies deliberately diverge during training whenever the
mask length exceeds a layer's break-even rank; the step log shows both.

The same training core drives the learned baselines (different mask
objects, no dense switch); see baselines.py.
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, InputError, NumericalError
from .factorization import truncate, whiten_and_decompose
from .guidance import (MODE_DENSE, MODE_LOW_RANK, CompressibleLayer,
                       capacity_at_rank, mode_for_ratio)
from .masks import budget_rank
from .model import CalibrationSet, CompressibleModel

DEFAULT_MASK_STEPS = 100


@dataclass
class TrainConfig:
    target_ratio: float
    lambda1: float = 100.0
    lambda2: float = 100.0
    mask_steps: int = DEFAULT_MASK_STEPS
    lr: float = 1e-3
    epochs: int = 10
    samples: int = 256
    seq_len: int = 512
    batch_size: int = 16
    seed: int = 0
    clamp_guidance: bool = True
    damping: float = 1e-6

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.target_ratio <= 1.0:
            raise ConfigError(f"target_ratio must be in (0, 1], got {self.target_ratio}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda weights must be nonnegative")
        if min(self.mask_steps, self.epochs, self.samples, self.seq_len,
               self.batch_size) < 1:
            raise ConfigError("mask_steps, epochs, samples, seq_len, batch_size "
                              "must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.damping < 0:
            raise ConfigError("damping must be nonnegative")
        return self


@dataclass
class StepRecord:
    step: int
    model_loss: float
    guidance_mean: float
    ratio_penalty: float
    total: float
    realized_ratio: float


@dataclass
class LayerAllocation:
    name: str
    rows: int
    cols: int
    mode: str
    rank: int              # 0 when dense
    ratio: float           # final realized per-layer ratio
    preserved: float       # capacity metric at the final allocation


@dataclass
class TrainRun:
    method: str
    target_ratio: float
    steps: list[StepRecord]
    trained_ratios: dict[str, float]
    trained_modes: dict[str, str]
    scale_factor: float
    allocations: list[LayerAllocation]
    realized_ratio: float
    seed: int
    notes: list[str] = field(default_factory=list)

    def final_ranks(self) -> dict[str, int | str]:
        return {a.name: ("dense" if a.mode == MODE_DENSE else a.rank)
                for a in self.allocations}

    def dense_mode_count(self) -> int:
        return sum(a.mode == MODE_DENSE for a in self.allocations)

    def allocation_dict(self) -> dict:
        return {
            "method": self.method,
            "target_ratio": self.target_ratio,
            "realized_ratio": self.realized_ratio,
            "scale_factor": self.scale_factor,
            "seed": self.seed,
            "layers": [asdict(a) for a in self.allocations],
            "notes": self.notes,
        }

    def steps_csv(self) -> str:
        buf = _io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "model_loss", "guidance_mean", "ratio_penalty",
                         "total", "realized_ratio"])
        for rec in self.steps:
            writer.writerow([rec.step, repr(rec.model_loss), repr(rec.guidance_mean),
                             repr(rec.ratio_penalty), repr(rec.total),
                             repr(rec.realized_ratio)])
        return buf.getvalue()


def prepare_layers(model: CompressibleModel, calib: CalibrationSet,
                   mask_steps: int = DEFAULT_MASK_STEPS, clamp_guidance: bool = True,
                   damping: float = 1e-6) -> list[CompressibleLayer]:
    """Factor every compressible layer against its captured activations."""
    layers = []
    for name in model.compressible_names():
        fact = layer_factorization(model, calib, name, damping)
        layers.append(CompressibleLayer(name, model.weights[name].value, fact,
                                        mask_steps, clamp_guidance))
    return layers


def layer_factorization(model: CompressibleModel, calib: CalibrationSet,
                        name: str, damping: float):
    if model.layer_modes[name] != "dense":
        raise InputError(f"layer {name} is already factored; compress a dense model")
    if name not in calib.activations:
        raise InputError(f"calibration set is missing activations for {name}")
    return whiten_and_decompose(model.weights[name].value,
                                calib.activations[name], damping)


def objective(model_loss: ad.Node, guidance_losses: list[ad.Node],
              soft_counts: list[ad.Node], c_total: float,
              cfg: TrainConfig) -> ad.Node:
    """Joint loss: CE + lambda1 * mean(L_g) + lambda2 * (sum(C)/C_t - target)^2."""
    if not guidance_losses:
        raise InputError("objective needs at least one layer")
    n = len(guidance_losses)
    guidance_term = ad.scale(ad.add_many(guidance_losses), cfg.lambda1 / n)
    ratio_gap = ad.add_scalar(ad.scale(ad.add_many(soft_counts), 1.0 / c_total),
                              -cfg.target_ratio)
    penalty_term = ad.scale(ad.square(ratio_gap), cfg.lambda2)
    return ad.add(ad.add(model_loss, guidance_term), penalty_term)


def train_masks(model: CompressibleModel, calib: CalibrationSet, cfg: TrainConfig,
                layers: list, method: str, allow_dense: bool = True,
                lr: float | None = None) -> TrainRun:
    """Shared training loop over any mask-layer objects (see CompressibleLayer
    for the protocol: trainables / begin_step / effective_weight)."""
    cfg.validate()
    model.set_trainable(False)
    by_name = {layer.name: layer for layer in layers}
    c_total = float(model.compressible_dense_count())
    params = [p for layer in layers for p in layer.trainables()]
    opt = ad.AdamW(params, lr=lr if lr is not None else cfg.lr, weight_decay=0.01)
    rng = ad.make_rng(cfg.seed)
    windows = calib.windows
    records: list[StepRecord] = []
    notes = [note for layer in layers for note in getattr(layer, "notes", [])]

    step_index = 0
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        for start in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            batch = windows[order[start: start + cfg.batch_size]]
            states = {layer.name: layer.begin_step(rng) for layer in layers}

            def masked_linear(name: str, x: ad.Node) -> ad.Node:
                weight = by_name[name].effective_weight(states[name])
                return ad.matmul(x, ad.transpose(weight))

            model_loss = model.loss(batch, layer_fn=masked_linear)
            total = objective(model_loss,
                              [states[l.name].guidance for l in layers],
                              [states[l.name].soft_count for l in layers],
                              c_total, cfg)
            value = total.item()
            if not np.isfinite(value):
                detail = ", ".join(
                    f"{l.name}: R={states[l.name].ratio:.3f} "
                    f"sigma0={l.fact.sigma[0]:.3e}" for l in layers)
                raise NumericalError(f"training loss became non-finite at step "
                                     f"{step_index}; per-layer state: {detail}")
            total.backward()
            opt.step()

            realized = sum(states[l.name].realized_count for l in layers) / c_total
            guidance_mean = float(np.mean([states[l.name].eval.loss for l in layers]))
            soft_ratio = sum(states[l.name].soft_count.item() for l in layers) / c_total
            records.append(StepRecord(
                step=step_index, model_loss=model_loss.item(),
                guidance_mean=guidance_mean,
                ratio_penalty=(soft_ratio - cfg.target_ratio) ** 2,
                total=value, realized_ratio=realized))
            step_index += 1

    trained_ratios = {layer.name: layer.current_ratio() for layer in layers}
    trained_modes = {name: (mode_for_ratio(r) if allow_dense else MODE_LOW_RANK)
                     for name, r in trained_ratios.items()}
    final_ranks, scale_factor, realized_ratio = rescale_to_target(
        layers, trained_ratios, cfg.target_ratio, allow_dense=allow_dense)
    allocations = _allocations(layers, final_ranks)
    return TrainRun(method=method, target_ratio=cfg.target_ratio, steps=records,
                    trained_ratios=trained_ratios, trained_modes=trained_modes,
                    scale_factor=scale_factor, allocations=allocations,
                    realized_ratio=realized_ratio, seed=cfg.seed, notes=notes)


def train(model: CompressibleModel, calib: CalibrationSet, cfg: TrainConfig,
          layers: list[CompressibleLayer] | None = None
          ) -> tuple[TrainRun, list[CompressibleLayer]]:
    """Adaptive allocation: guidance-aware masks with the dense switch."""
    cfg.validate()
    if layers is None:
        layers = prepare_layers(model, calib, cfg.mask_steps, cfg.clamp_guidance,
                                cfg.damping)
    run = train_masks(model, calib, cfg, layers, method="ara", allow_dense=True)
    return run, layers


def _allocations(layers: list,
                 final_ranks: dict[str, int | str]) -> list[LayerAllocation]:
    out = []
    for layer in layers:
        decision = final_ranks[layer.name]
        if decision == "dense":
            ratio, rank, mode = 1.0, 0, MODE_DENSE
            preserved = 1.0
        else:
            rank = int(decision)
            ratio = rank * (layer.rows + layer.cols) / layer.dense_count
            mode = MODE_LOW_RANK
            preserved, _ = capacity_at_rank(layer.fact, rank)
        out.append(LayerAllocation(name=layer.name, rows=layer.rows, cols=layer.cols,
                                   mode=mode, rank=rank, ratio=ratio,
                                   preserved=preserved))
    return out


def rescale_to_target(layers: list, trained_ratios: dict[str, float], target: float,
                      allow_dense: bool = True
                      ) -> tuple[dict[str, int | str], float, float]:
    """One global factor c on all low-rank ratios so real storage meets the target.

    Dense-mode layers are never demoted. With the dense switch active,
    target == 1 short-circuits to the all-dense allocation: it is the only
    configuration whose realized ratio is exactly 1 (a floored factor pair
    either loses rank or costs more than the dense matrix).
    """
    c_total = float(sum(layer.dense_count for layer in layers))
    if allow_dense and target >= 1.0:
        return {l.name: "dense" for l in layers}, 1.0, 1.0

    dense_names = ({l.name for l in layers if trained_ratios[l.name] >= 1.0}
                   if allow_dense else set())
    lowrank = [l for l in layers if l.name not in dense_names]
    dense_cost = sum(l.dense_count for l in layers if l.name in dense_names)

    def ranks_at(c: float) -> dict[str, int]:
        return {l.name: budget_rank(c * trained_ratios[l.name], l.rows, l.cols,
                                    l.mask_length)
                for l in lowrank}

    def realized(c: float) -> float:
        ranks = ranks_at(c)
        cost = dense_cost + sum(ranks[l.name] * (l.rows + l.cols) for l in lowrank)
        return cost / c_total

    if realized(0.0) > target + 1e-12:
        raise InputError(
            f"target ratio {target} is unreachable: dense-mode layers alone hold "
            f"{realized(0.0):.4f} of the parameters; lower the target or retrain "
            "with a stronger ratio penalty")

    lo, hi = 0.0, 1.0
    while realized(hi) <= target and hi < 1e9:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if realized(mid) <= target:
            lo = mid
        else:
            hi = mid

    ranks = ranks_at(lo)
    final: dict[str, int | str] = {name: "dense" for name in dense_names}
    final.update(ranks)
    return final, lo, realized(lo)


def materialize(model: CompressibleModel, layers: list,
                final_ranks: dict[str, int | str]) -> CompressibleModel:
    """Build the compressed model; dense layers keep their exact weights."""
    out = CompressibleModel(model.dims)
    by_name = {layer.name: layer for layer in layers}
    compressible = set(model.compressible_names())
    for name, node in model.weights.items():
        if name in compressible and name in final_ranks:
            continue
        out.weights[name] = ad.const(node.value.copy())
    for name in model.compressible_names():
        decision = final_ranks.get(name, "dense")
        if decision == "dense":
            source = by_name[name].weight if name in by_name else model.dense_weight(name)
            out.weights[name] = ad.const(np.array(source))
            out.layer_modes[name] = "dense"
        else:
            rank = int(decision)
            layer = by_name[name]
            if rank == 0:
                left = np.zeros((layer.rows, 0))
                right = np.zeros((0, layer.cols))
            else:
                pair = truncate(layer.fact, rank)
                left, right = pair.left, pair.right
            out.weights[f"{name}.left"] = ad.const(left)
            out.weights[f"{name}.right"] = ad.const(right)
            out.layer_modes[name] = rank
    return out
