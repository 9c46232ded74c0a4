"""Dense-matrix reverse-mode automatic differentiation.

Everything differentiable in this package is a 2-D float64 matrix wrapped
in a :class:`Node`. Operations record a tape of backward closures;
``backward()`` on a scalar loss replays it in reverse topological order.
The op vocabulary is fixed and first-order only; it is exactly what a
masked low-rank language model plus its mask objectives need, nothing more.

Broadcasting is limited to two cases: a (1, 1) scalar against any matrix,
and a (1, n) row against an (m, n) matrix (needed to scale every row of an
activations matrix by a length-n mask). Gradients for a broadcast operand
are summed over the broadcast axis.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, NumericalError, ShapeError, UsageError

Array = np.ndarray


def as_matrix(data) -> Array:
    """Coerce to a 2-D float64 array (vectors become one row).

    Finiteness is enforced once per value: at leaf creation (param/const)
    and inside each op that can produce non-finite output from finite input.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _check_finite(value: Array, op: str) -> Array:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op} produced non-finite values")
    return value


class Node:
    """A matrix value plus the bookkeeping needed for reverse-mode AD.

    ``grad`` is lazily allocated: it reads as zeros until a backward pass
    has actually deposited something, and ``zero_grad()`` drops it again.
    """

    __slots__ = ("value", "requires_grad", "_grad", "_grad_borrowed", "_parents",
                 "_backward_rules", "_backward_done")

    def __init__(self, value, requires_grad: bool = False,
                 parents: Sequence["Node"] = (),
                 backward_rules: Sequence[Callable[[Array], Array]] = ()):
        self.value = as_matrix(value)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self._grad: Array | None = None
        self._grad_borrowed = False
        # Only keep edges that can carry gradient; constants prune the tape.
        if self.requires_grad:
            self._parents = tuple(parents)
            self._backward_rules = tuple(backward_rules)
        else:
            self._parents = ()
            self._backward_rules = ()
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> Array:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @property
    def has_grad(self) -> bool:
        return self._grad is not None

    def _accumulate(self, delta: Array) -> None:
        # First contribution is borrowed (rules may hand back a child's own
        # buffer, which is stable once that child has fired); a second
        # contribution allocates fresh storage instead of mutating it.
        if self._grad is None:
            self._grad = delta
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self._grad = self._grad + delta
            self._grad_borrowed = False
        else:
            self._grad += delta

    def zero_grad(self) -> None:
        self._grad = None
        self._grad_borrowed = False

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise UsageError(f"item() requires a scalar node, got shape {self.value.shape}")
        return float(self.value[0, 0])

    def backward(self) -> None:
        """Populate gradients of every reachable grad-requiring node.

        Only valid on a (1, 1) scalar. A second call on the same node is an
        error; rebuild the graph (or zero_grad and rerun the forward pass)
        instead of reusing a consumed tape.
        """
        if self.value.shape != (1, 1):
            raise UsageError(f"backward() requires a scalar loss, got shape {self.value.shape}")
        if self._backward_done:
            raise UsageError("backward() already called on this node; rebuild the graph")
        self._backward_done = True
        if not self.requires_grad:
            return

        order: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(np.ones((1, 1)))
        for node in reversed(order):
            grad = node._grad
            if grad is None:
                continue
            for parent, rule in zip(node._parents, node._backward_rules):
                if parent.requires_grad:
                    parent._accumulate(rule(grad))

    # -- operator sugar -------------------------------------------------

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return subtract(self, other)

    def __mul__(self, other) -> "Node":
        if isinstance(other, Node):
            return hadamard(self, other)
        return scale(self, float(other))

    def __rmul__(self, other) -> "Node":
        return scale(self, float(other))

    def __neg__(self) -> "Node":
        return scale(self, -1.0)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = "param" if self.requires_grad and not self._parents else \
            ("traced" if self.requires_grad else "const")
        return f"Node({self.value.shape[0]}x{self.value.shape[1]}, {flag})"


def param(data) -> Node:
    """A trainable leaf."""
    return Node(_check_finite(as_matrix(data), "leaf"), requires_grad=True)


def const(data) -> Node:
    """A non-trainable leaf; gradient never flows into it."""
    return Node(_check_finite(as_matrix(data), "leaf"), requires_grad=False)


# -- shape plumbing ------------------------------------------------------

def _broadcast_check(a: Node, b: Node, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return
    if (sa[0] == 1 and sa[1] == sb[1]) or (sb[0] == 1 and sb[1] == sa[1]):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(grad: Array, shape: tuple[int, int]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == (1, 1):
        return grad.sum(keepdims=True).reshape(1, 1)
    return grad.sum(axis=0, keepdims=True)


# -- core ops ------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    value = _check_finite(a.value @ b.value, "matmul")
    av, bv = a.value, b.value
    return Node(value, parents=(a, b),
                backward_rules=(lambda g: g @ bv.T, lambda g: av.T @ g))


def transpose(a: Node) -> Node:
    return Node(a.value.T, parents=(a,), backward_rules=(lambda g: g.T,))


def add(a: Node, b: Node) -> Node:
    _broadcast_check(a, b, "add")
    value = _check_finite(a.value + b.value, "add")
    sa, sb = a.shape, b.shape
    return Node(value, parents=(a, b),
                backward_rules=(lambda g: _reduce_to(g, sa), lambda g: _reduce_to(g, sb)))


def subtract(a: Node, b: Node) -> Node:
    _broadcast_check(a, b, "subtract")
    value = _check_finite(a.value - b.value, "subtract")
    sa, sb = a.shape, b.shape
    return Node(value, parents=(a, b),
                backward_rules=(lambda g: _reduce_to(g, sa),
                                lambda g: _reduce_to(-g, sb)))


def hadamard(a: Node, b: Node) -> Node:
    _broadcast_check(a, b, "hadamard")
    value = _check_finite(a.value * b.value, "hadamard")
    av, bv, sa, sb = a.value, b.value, a.shape, b.shape
    return Node(value, parents=(a, b),
                backward_rules=(lambda g: _reduce_to(g * bv, sa),
                                lambda g: _reduce_to(g * av, sb)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(_check_finite(a.value * c, "scale"), parents=(a,),
                backward_rules=(lambda g: g * c,))


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return Node(_check_finite(a.value + c, "add_scalar"), parents=(a,),
                backward_rules=(lambda g: g,))


def square(a: Node) -> Node:
    av = a.value
    return Node(_check_finite(av * av, "square"), parents=(a,),
                backward_rules=(lambda g: 2.0 * av * g,))


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise InputError("sqrt of negative entries")
    value = np.sqrt(a.value)
    val = value
    return Node(value, parents=(a,),
                backward_rules=(lambda g: g * 0.5 / np.maximum(val, 1e-300),))


def exp(a: Node) -> Node:
    value = _check_finite(np.exp(a.value), "exp")
    return Node(value, parents=(a,), backward_rules=(lambda g: g * value,))


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise InputError("log of non-positive entries")
    av = a.value
    return Node(np.log(av), parents=(a,), backward_rules=(lambda g: g / av,))


def _stable_sigmoid(x: Array) -> Array:
    # exp(-x) overflowing to +inf still yields the correct 0.0 after division
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(a: Node) -> Node:
    sig = _stable_sigmoid(a.value)
    value = a.value * sig
    av = a.value
    return Node(value, parents=(a,),
                backward_rules=(lambda g: g * (sig * (1.0 + av * (1.0 - sig))),))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return Node(value, parents=(a,),
                backward_rules=(lambda g: g * (1.0 - value * value),))


def sigmoid(a: Node) -> Node:
    value = _stable_sigmoid(a.value)
    return Node(value, parents=(a,),
                backward_rules=(lambda g: g * value * (1.0 - value),))


def softmax_rows(a: Node) -> Node:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)
    val = value

    def back(g: Array) -> Array:
        dot = (g * val).sum(axis=1, keepdims=True)
        return val * (g - dot)

    return Node(value, parents=(a,), backward_rules=(back,))


def sum_all(a: Node) -> Node:
    rows, cols = a.shape
    return Node(np.array([[a.value.sum()]]), parents=(a,),
                backward_rules=(lambda g: np.full((rows, cols), g[0, 0]),))


def mean_all(a: Node) -> Node:
    rows, cols = a.shape
    inv = 1.0 / (rows * cols)
    return Node(np.array([[a.value.mean()]]), parents=(a,),
                backward_rules=(lambda g: np.full((rows, cols), g[0, 0] * inv),))


def rms_normalize(a: Node, eps: float = 1e-6) -> Node:
    """Row-wise x / sqrt(mean(x^2) + eps); the learned gain is applied outside."""
    ms = (a.value * a.value).mean(axis=1, keepdims=True) + eps
    inv_rms = 1.0 / np.sqrt(ms)
    value = a.value * inv_rms
    av, n = a.value, a.shape[1]

    def back(g: Array) -> Array:
        dot = (g * av).sum(axis=1, keepdims=True)
        return inv_rms * g - av * (inv_rms ** 3) * (dot / n)

    return Node(value, parents=(a,), backward_rules=(back,))


def gather_rows(table: Node, indices: Array) -> Node:
    """Select rows of an embedding table; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    vocab, width = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise InputError(f"gather index out of range [0, {vocab})")
    value = table.value[idx]

    def back(g: Array) -> Array:
        out = np.zeros((vocab, width))
        np.add.at(out, idx, g)
        return out

    return Node(value, parents=(table,), backward_rules=(back,))


def cross_entropy(logits: Node, targets: Array) -> Node:
    """Mean negative log-softmax probability of the target indices."""
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    rows, vocab = logits.shape
    if idx.size != rows:
        raise InputError(f"need one target per row: {idx.size} targets, {rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise InputError(f"target index out of range [0, {vocab})")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sums = e.sum(axis=1, keepdims=True)
    picked = shifted[np.arange(rows), idx]
    value = np.array([[float(np.mean(np.log(sums[:, 0]) - picked))]])

    def back(g: Array) -> Array:
        d = e / sums
        d[np.arange(rows), idx] -= 1.0
        d *= g[0, 0] / rows
        return d

    return Node(_check_finite(value, "cross_entropy"), parents=(logits,),
                backward_rules=(back,))


def straight_through(soft: Node, hard: Array) -> Node:
    """Forward the hard values exactly, pass gradients through to the soft ones."""
    hard = as_matrix(hard)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {soft.shape} vs {hard.shape}")
    return Node(hard.copy(), parents=(soft,), backward_rules=(lambda g: g,))


def add_many(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise InputError("add_many needs at least one node")
    total = nodes[0]
    for node in nodes[1:]:
        total = add(total, node)
    return total


# -- optimizer -----------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay Adam over a fixed set of parameter nodes."""

    def __init__(self, params: Sequence[Node], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise UsageError("AdamW given a node that does not require grad")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        """One update; requires populated gradients, zeroes them afterward."""
        for p in self.params:
            if not p.has_grad:
                raise UsageError("adamw step with missing gradient; run backward() first")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def make_rng(seed: int) -> np.random.Generator:
    """The one RNG constructor; every random draw in the package goes through it."""
    return np.random.Generator(np.random.PCG64(int(seed)))
