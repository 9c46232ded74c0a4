"""Desk-scale compressible byte-level language model and its data plumbing.

The model is a small decoder-style stack: a byte embedding mixed over a
short decayed context window, then ``depth`` blocks of
[RMS norm -> up projection -> silu -> down projection] with residual
connections, a final norm, and a vocabulary head. The block projections
(plus single-head causal attention projections when enabled) are the
compressible modules; embedding, norms, and head belong to the frozen
backbone.

Token windows are fixed-length, non-overlapping slices of the corpus. Each
window carries ``context_order`` extra leading bytes so every predicted
position sees a full mixing context.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import io as mio
from .errors import InputError, NumericalError

LayerFn = Callable[[str, ad.Node], ad.Node]

BYTE_VOCAB = 256
NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelDims:
    vocab: int = BYTE_VOCAB
    width: int = 64
    hidden: int = 128
    depth: int = 2
    attention: bool = False
    context_order: int = 4
    context_decay: float = 0.7

    def validate(self) -> "ModelDims":
        if min(self.vocab, self.width, self.hidden, self.depth) < 1:
            raise InputError("model dimensions must be positive")
        if self.context_order < 1 or not 0.0 <= self.context_decay < 1.0:
            raise InputError("context window needs order >= 1 and decay in [0, 1)")
        return self


@dataclass
class CalibrationSet:
    """Seeded token windows plus per-layer captured inputs (features x tokens)."""

    windows: np.ndarray
    activations: dict[str, np.ndarray]
    seed: int


class CompressibleModel:
    """Weights live in persistent autodiff leaves; compressible layers may be
    stored dense or as a (left, right) factor pair."""

    def __init__(self, dims: ModelDims):
        self.dims = dims.validate()
        self.weights: dict[str, ad.Node] = {}
        # mode per compressible layer: "dense" or integer rank
        self.layer_modes: dict[str, str | int] = {}

    # -- structure -------------------------------------------------------

    def block_layer_names(self, i: int) -> list[str]:
        names = []
        if self.dims.attention:
            names += [f"block{i}.q", f"block{i}.k", f"block{i}.v", f"block{i}.o"]
        names += [f"block{i}.up", f"block{i}.down"]
        return names

    def compressible_names(self) -> list[str]:
        out = []
        for i in range(self.dims.depth):
            out.extend(self.block_layer_names(i))
        return out

    def layer_shape(self, name: str) -> tuple[int, int]:
        kind = name.split(".", 1)[1]
        w, h = self.dims.width, self.dims.hidden
        return {"up": (h, w), "down": (w, h), "q": (w, w), "k": (w, w),
                "v": (w, w), "o": (w, w)}[kind]

    def dense_weight(self, name: str) -> np.ndarray:
        """The dense matrix of a compressible layer (reconstructed if factored)."""
        if self.layer_modes[name] == "dense":
            return self.weights[name].value
        return self.weights[f"{name}.left"].value @ self.weights[f"{name}.right"].value

    def backbone_names(self) -> list[str]:
        names = ["embed"]
        for i in range(self.dims.depth):
            if self.dims.attention:
                names.append(f"block{i}.norm_attn")
            names.append(f"block{i}.norm_mlp")
        names += ["norm_out", "head"]
        return names

    def all_parameters(self) -> list[ad.Node]:
        return list(self.weights.values())

    def set_trainable(self, flag: bool) -> None:
        for node in self.weights.values():
            node.requires_grad = bool(flag)
            node.zero_grad()

    def parameter_count(self) -> int:
        """Realized parameter count (factored layers count their factors)."""
        return sum(n.value.size for n in self.weights.values())

    def compressible_dense_count(self) -> int:
        """Dense-equivalent parameter count of the compressible layers (C_t)."""
        total = 0
        for name in self.compressible_names():
            rows, cols = self.layer_shape(name)
            total += rows * cols
        return total

    def compressible_realized_count(self) -> int:
        total = 0
        for name in self.compressible_names():
            if self.layer_modes[name] == "dense":
                total += self.weights[name].value.size
            else:
                total += (self.weights[f"{name}.left"].value.size
                          + self.weights[f"{name}.right"].value.size)
        return total

    def realized_ratio(self) -> float:
        return self.compressible_realized_count() / self.compressible_dense_count()

    # -- forward ----------------------------------------------------------

    def _apply_layer(self, name: str, x: ad.Node, layer_fn: LayerFn | None,
                     capture: dict[str, list[np.ndarray]] | None) -> ad.Node:
        if capture is not None:
            capture.setdefault(name, []).append(x.value.T.copy())
        if layer_fn is not None:
            return layer_fn(name, x)
        if self.layer_modes[name] == "dense":
            return ad.matmul(x, ad.transpose(self.weights[name]))
        h = ad.matmul(x, ad.transpose(self.weights[f"{name}.right"]))
        return ad.matmul(h, ad.transpose(self.weights[f"{name}.left"]))

    def _normed(self, x: ad.Node, gain_name: str) -> ad.Node:
        return ad.hadamard(ad.rms_normalize(x, NORM_EPS), self.weights[gain_name])

    def _context_embedding(self, windows: np.ndarray) -> ad.Node:
        k = self.dims.context_order
        t = windows.shape[1] - k
        parts = []
        for j in range(k):
            idx = windows[:, k - 1 - j: k - 1 - j + t].reshape(-1)
            g = ad.gather_rows(self.weights["embed"], idx)
            parts.append(ad.scale(g, self.dims.context_decay ** j) if j else g)
        return ad.add_many(parts)

    def _block(self, x: ad.Node, i: int, rows_per_window: int,
               layer_fn: LayerFn | None, capture) -> ad.Node:
        if self.dims.attention:
            x = ad.add(x, self._attention(x, i, rows_per_window, layer_fn, capture))
        h = self._normed(x, f"block{i}.norm_mlp")
        u = ad.silu(self._apply_layer(f"block{i}.up", h, layer_fn, capture))
        return ad.add(x, self._apply_layer(f"block{i}.down", u, layer_fn, capture))

    def _attention(self, x: ad.Node, i: int, rows: int,
                   layer_fn: LayerFn | None, capture) -> ad.Node:
        # single head over one window; caller guarantees x holds exactly one window
        h = self._normed(x, f"block{i}.norm_attn")
        q = self._apply_layer(f"block{i}.q", h, layer_fn, capture)
        k = self._apply_layer(f"block{i}.k", h, layer_fn, capture)
        v = self._apply_layer(f"block{i}.v", h, layer_fn, capture)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.dims.width))
        causal = np.triu(np.full((rows, rows), -1e30), k=1)
        attn = ad.softmax_rows(ad.add(scores, ad.const(causal)))
        ctx = ad.matmul(attn, v)
        return self._apply_layer(f"block{i}.o", ctx, layer_fn, capture)

    def _forward_rows(self, windows: np.ndarray, layer_fn, capture) -> ad.Node:
        """Logits for a batch whose windows may be flattened together."""
        t = windows.shape[1] - self.dims.context_order
        x = self._context_embedding(windows)
        for i in range(self.dims.depth):
            x = self._block(x, i, t, layer_fn, capture)
        x = self._normed(x, "norm_out")
        return ad.matmul(x, ad.transpose(self.weights["head"]))

    def logits_values(self, windows: np.ndarray) -> np.ndarray:
        """Inference helper: next-byte logits as a plain array, (tokens, vocab)."""
        windows = np.asarray(windows, dtype=np.int64).reshape(-1, windows.shape[-1]
                                                              if np.ndim(windows) else 0)
        t = windows.shape[1] - self.dims.context_order
        if windows.shape[0] == 0:
            return np.zeros((0, self.dims.vocab))
        if t < 1:
            raise InputError("windows must be (batch, context_order + seq_len)")
        if self.dims.attention:
            return np.vstack([self._forward_rows(row[None, :], None, None).value
                              for row in windows])
        return self._forward_rows(windows, None, None).value

    def loss(self, windows: np.ndarray, layer_fn: LayerFn | None = None,
             capture: dict[str, list[np.ndarray]] | None = None) -> ad.Node:
        """Mean next-byte cross entropy over a batch of windows."""
        windows = np.asarray(windows, dtype=np.int64)
        if windows.ndim != 2 or windows.shape[1] <= self.dims.context_order:
            raise InputError("windows must be (batch, context_order + seq_len)")
        targets = windows[:, self.dims.context_order:].reshape(-1)
        if self.dims.attention:
            # attention mixes positions within one window; keep windows separate
            losses = []
            for row in windows:
                logits = self._forward_rows(row[None, :], layer_fn, capture)
                losses.append(ad.cross_entropy(
                    logits, row[self.dims.context_order:]))
            return ad.scale(ad.add_many(losses), 1.0 / len(losses))
        logits = self._forward_rows(windows, layer_fn, capture)
        return ad.cross_entropy(logits, targets)

    # -- persistence -------------------------------------------------------

    def to_file(self, path: str | Path) -> None:
        dims = self.dims
        header = {
            "dims": {"vocab": dims.vocab, "width": dims.width, "hidden": dims.hidden,
                     "depth": dims.depth, "attention": dims.attention,
                     "context_order": dims.context_order,
                     "context_decay": dims.context_decay},
            "layers": {name: ({"mode": "dense"} if mode == "dense"
                              else {"mode": "lowrank", "rank": int(mode)})
                       for name, mode in self.layer_modes.items()},
            "tensors": [{"name": name, "rows": node.value.shape[0],
                         "cols": node.value.shape[1]}
                        for name, node in sorted(self.weights.items())],
        }
        mio.save_model_file(path, header,
                            {name: node.value for name, node in self.weights.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "CompressibleModel":
        header, tensors = mio.load_model_file(path)
        d = header["dims"]
        model = cls(ModelDims(vocab=d["vocab"], width=d["width"], hidden=d["hidden"],
                              depth=d["depth"], attention=d["attention"],
                              context_order=d["context_order"],
                              context_decay=d["context_decay"]))
        model.weights = {name: ad.const(arr) for name, arr in tensors.items()}
        model.layer_modes = {name: (spec["rank"] if spec["mode"] == "lowrank"
                                    else "dense")
                             for name, spec in header["layers"].items()}
        return model


def build_model(width: int, depth: int, vocab: int = BYTE_VOCAB, seed: int = 0,
                hidden: int | None = None, attention: bool = False) -> CompressibleModel:
    """Randomly initialized model; identical seeds give identical weights."""
    dims = ModelDims(vocab=vocab, width=width, hidden=hidden or 2 * width,
                     depth=depth, attention=attention)
    model = CompressibleModel(dims)
    rng = ad.make_rng(seed)
    residual_scale = 1.0 / np.sqrt(2.0 * dims.depth)

    def init(rows, cols, std):
        return ad.const(rng.standard_normal((rows, cols)) * std)

    model.weights["embed"] = init(dims.vocab, dims.width, 0.02)
    for i in range(dims.depth):
        if attention:
            model.weights[f"block{i}.norm_attn"] = ad.const(np.ones((1, dims.width)))
            for tag in ("q", "k", "v"):
                model.weights[f"block{i}.{tag}"] = init(
                    dims.width, dims.width, dims.width ** -0.5)
            model.weights[f"block{i}.o"] = init(
                dims.width, dims.width, residual_scale * dims.width ** -0.5)
        model.weights[f"block{i}.norm_mlp"] = ad.const(np.ones((1, dims.width)))
        model.weights[f"block{i}.up"] = init(dims.hidden, dims.width, dims.width ** -0.5)
        model.weights[f"block{i}.down"] = init(
            dims.width, dims.hidden, residual_scale * dims.hidden ** -0.5)
    model.weights["norm_out"] = ad.const(np.ones((1, dims.width)))
    model.weights["head"] = init(dims.vocab, dims.width, 0.02)
    model.layer_modes = {name: "dense" for name in model.compressible_names()}
    return model


# -- corpus and windows ---------------------------------------------------

def load_corpus(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data:
        raise InputError(f"corpus file {path} is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def split_corpus(tokens: np.ndarray, heldout_fraction: float = 0.1
                 ) -> tuple[np.ndarray, np.ndarray]:
    cut = int(len(tokens) * (1.0 - heldout_fraction))
    return tokens[:cut], tokens[cut:]


def window_pool(tokens: np.ndarray, seq_len: int, context_order: int) -> np.ndarray:
    """All non-overlapping windows of context_order + seq_len tokens."""
    size = seq_len + context_order
    count = len(tokens) // size
    if count == 0:
        raise InputError(
            f"corpus has {len(tokens)} tokens, shorter than one {size}-token window")
    return tokens[:count * size].reshape(count, size)


def sample_windows(tokens: np.ndarray, seq_len: int, context_order: int,
                   count: int, seed: int) -> np.ndarray:
    pool = window_pool(tokens, seq_len, context_order)
    if count > len(pool):
        raise InputError(f"requested {count} windows, corpus only has {len(pool)}")
    picks = ad.make_rng(seed).choice(len(pool), size=count, replace=False)
    return pool[np.sort(picks)]


# -- training, calibration, evaluation ----------------------------------------

def pretrain(model: CompressibleModel, tokens: np.ndarray, steps: int = 2000,
             lr: float = 3e-3, batch_size: int = 32, seq_len: int = 64,
             seed: int = 0, log_every: int = 0) -> list[float]:
    """Fit all model weights with AdamW; returns the per-step loss trace."""
    pool = window_pool(tokens, seq_len, model.dims.context_order)
    rng = ad.make_rng(seed ^ 0x5EED)
    model.set_trainable(True)
    opt = ad.AdamW(model.all_parameters(), lr=lr, weight_decay=0.01)
    trace: list[float] = []
    order = rng.permutation(len(pool))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(pool))
            cursor = 0
        batch = pool[order[cursor: cursor + batch_size]]
        cursor += batch_size
        loss = model.loss(batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(
                f"pretraining diverged at step {step}; try a lower learning rate "
                f"than {lr}")
        loss.backward()
        opt.step()
        trace.append(value)
        if log_every and (step + 1) % log_every == 0:
            print(f"  pretrain step {step + 1}/{steps} loss {value:.4f}")
    model.set_trainable(False)
    return trace


def capture_calibration(model: CompressibleModel, tokens: np.ndarray,
                        samples: int, seq_len: int, seed: int) -> CalibrationSet:
    """Record each compressible layer's input activations on seeded windows."""
    windows = sample_windows(tokens, seq_len, model.dims.context_order, samples, seed)
    capture: dict[str, list[np.ndarray]] = {}
    model.loss(windows, capture=capture)
    activations = {name: np.concatenate(chunks, axis=1)
                   for name, chunks in capture.items()}
    for name, x in activations.items():
        if x.shape[1] < x.shape[0]:
            raise InputError(
                f"layer {name}: {x.shape[1]} calibration tokens for {x.shape[0]} "
                "input features; increase samples or seq_len")
    return CalibrationSet(windows=windows, activations=activations, seed=seed)


def evaluate_ce(model: CompressibleModel, tokens: np.ndarray, seq_len: int = 64,
                batch_size: int = 64, max_windows: int | None = None
                ) -> tuple[float, float]:
    """Mean held-out cross entropy and perplexity exp(CE)."""
    pool = window_pool(tokens, seq_len, model.dims.context_order)
    if max_windows is not None:
        pool = pool[:max_windows]
    total, count = 0.0, 0
    for start in range(0, len(pool), batch_size):
        batch = pool[start: start + batch_size]
        n_tokens = batch.shape[0] * seq_len
        total += model.loss(batch).item() * n_tokens
        count += n_tokens
    ce = total / count
    return ce, float(np.exp(ce))
