"""Reverse-mode automatic differentiation over dense float64 arrays.

The kernel set is deliberately small: matmul, transpose, add, scale, relu,
softmax, layer normalization, embedding lookup, row concatenation,
cross-entropy, and seeded dropout. Operations record onto the active
:class:`Graph` (a tape); creation order is a topological order, so the
backward pass walks the tape in reverse and accumulates gradients
additively across fan-out. All arithmetic is float64 and deterministic:
identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericDomainError, ShapeError

_state = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_state, "graph", None)


class Tensor:
    """Dense float64 array that may participate in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.item())

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add a gradient contribution; no-op for tensors outside the trainable set."""
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]):
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Tape of operation records in execution (hence topological) order.

    Use as a context manager around one forward/backward pass::

        with Graph() as g:
            loss = cross_entropy(logits, targets)
            g.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev: Graph | None = None

    def __enter__(self) -> "Graph":
        self._prev = _active_graph()
        _state.graph = self
        return self

    def __exit__(self, *exc) -> None:
        _state.graph = self._prev
        self._prev = None

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(_Node(out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) to every recorded tensor that influences loss."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue  # dead branch: output never influenced the loss
            node.backward_fn(g)


class no_grad:
    """Context that suppresses recording; kernels run as plain numpy."""

    def __enter__(self):
        self._prev = _active_graph()
        _state.graph = None
        return self

    def __exit__(self, *exc):
        _state.graph = self._prev


def _make(out_data: np.ndarray, inputs: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    g = _active_graph()
    needs = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        g.record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add mismatch: {a.data.shape} + {b.data.shape}")

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g * s)

    return _make(a.data * s, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rejects non-finite input."""
    x = np.atleast_2d(a.data)
    if not np.isfinite(x).all():
        raise NumericDomainError("softmax input contains non-finite values")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out_data = p.reshape(a.data.shape)

    def backward(g: np.ndarray) -> None:
        g2 = np.atleast_2d(g)
        inner = (g2 * p).sum(axis=1, keepdims=True)
        a.accumulate_grad((p * (g2 - inner)).reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def softmax(v) -> np.ndarray:
    """Probability vector for a vector of reals (plain numpy convenience)."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError("softmax expects a nonempty vector")
    if not np.isfinite(arr).all():
        raise NumericDomainError("softmax input contains non-finite values")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine scale/shift."""
    x = a.data
    if x.ndim != 2 or gain.data.shape != (x.shape[1],) or bias.data.shape != (x.shape[1],):
        raise ShapeError("layer_norm expects (n, e) input with (e,) gain and bias")
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out_data = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=0))
        if a.requires_grad:
            gs = g * gain.data
            a.accumulate_grad(
                inv * (gs - gs.mean(axis=1, keepdims=True)
                       - xhat * (gs * xhat).mean(axis=1, keepdims=True))
            )

    return _make(out_data, (a, gain, bias), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding ids must be a 1-D index sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out_data = table.data[ids]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table.accumulate_grad(acc)

    return _make(out_data, (table,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one operand")
    width = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != width:
            raise ShapeError("concat_rows operands must share column count")
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.accumulate_grad(g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of target indices under row-softmax of logits.

    ``logits`` is (m, vocab); ``targets`` is m token indices. Row i contributes
    -log softmax(logits[i])[targets[i]]; reduction is "mean", "sum" or "none".
    """
    x = np.atleast_2d(logits.data)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {x.shape[0]} logit rows")
    if t.size and (t.min() < 0 or t.max() >= x.shape[1]):
        raise IndexError("cross_entropy target out of range")
    m = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(m).sum(axis=1))
    rows = np.arange(x.shape[0])
    losses = lse - m[rows, t]
    if reduction == "none":
        out_data = losses
    elif reduction == "sum":
        out_data = np.asarray(losses.sum())
    elif reduction == "mean":
        out_data = np.asarray(losses.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g: np.ndarray) -> None:
        p = np.exp(m - lse[:, None])
        p[rows, t] -= 1.0
        if reduction == "none":
            d = p * np.asarray(g).reshape(-1, 1)
        elif reduction == "sum":
            d = p * float(g)
        else:
            d = p * (float(g) / x.shape[0])
        logits.accumulate_grad(d.reshape(logits.data.shape))

    return _make(out_data, (logits,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a caller-owned generator (train-time only)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def backward(g: np.ndarray) -> None:
        a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5) -> dict[str, float]:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor computed from
    ``params``. Returns per-parameter max relative error, with denominator
    max(|analytic|, |numeric|, 1e-8). Non-deterministic ``f`` is rejected.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"step h must lie in [1e-7, 1e-3], got {h}")

    with no_grad():
        v1 = f().item()
        v2 = f().item()
    if v1 != v2:
        raise NumericDomainError("grad_check requires a deterministic function")

    for p in params.values():
        p.zero_grad()
    with Graph() as g:
        loss = f()
        g.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = f().item()
            flat[i] = orig - h
            with no_grad():
                down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = max(abs(ana[i]), abs(num), 1e-8)
            worst = max(worst, abs(ana[i] - num) / denom)
        report[name] = worst
    return report
