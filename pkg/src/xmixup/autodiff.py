"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Everything downstream (encoder, mixup gate, losses) is built from the
primitives in this module, so each primitive carries a hand-derived backward
rule and the whole set is validated against central finite differences.

Tensors are immutable value holders. Gradients are recorded on an explicit
:class:`GradTape`: while a tape is active (``with GradTape() as tape:``),
every primitive whose inputs require gradients appends one record, in
execution order. Execution order is automatically topological, so the
backward pass is a single reverse sweep that visits each record exactly once.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class AutodiffError(ValueError):
    """Raised on contract violations (bad shapes, non-finite inputs)."""


class Tensor:
    """Shape-tagged float64 array, optionally participating in gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError("non-finite input")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant copy of this value; gradients never flow through it."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic routes through the taped primitives.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Record:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_TAPES = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TAPES, "stack", None)
    if stack is None:
        stack = []
        _TAPES.stack = stack
    return stack


def active_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of primitive applications for one forward computation.

    Tapes are single-threaded; independent tapes on different threads do not
    share state.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("GradTape exited out of order")

    def grad(self, loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Raw gradients of a scalar ``loss`` w.r.t. an explicit tensor list."""
        if loss.data.shape != ():
            raise AutodiffError("loss must be scalar")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            for tensor, g_in in zip(rec.inputs, rec.grad_fn(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        out = []
        for tensor in wrt:
            g = grads.get(id(tensor))
            out.append(np.zeros_like(tensor.data) if g is None else np.asarray(g))
        return out


def backward(tape: GradTape, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradient of a scalar loss for every named parameter.

    Parameters that do not reach the loss through the tape get zero
    gradients. Deterministic: two calls on the same tape are bit-identical.
    """
    names = list(params)
    raw = tape.grad(loss, [params[name] for name in names])
    return {name: Tensor(g) for name, g in zip(names, raw)}


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.records.append(_Record(op, inputs, out, grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit("add", out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit("sub", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _emit("mul", out, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise AutodiffError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return g @ b_data.T, a_data.T @ g

    return _emit("matmul", out, (a, b), grad_fn)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        return (g.T,)

    return _emit("transpose", a.data.T, (a,), grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g, out=out):
        return (g * (1.0 - out * out),)

    return _emit("tanh", out, (a,), grad_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # 1/(1+e^-x) evaluated stably on both tails
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g, out=out):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", out, (a,), grad_fn)


def log_clamped(a, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); the floor keeps losses finite on zero probabilities."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, floor)
    out = np.log(clipped)
    mask = a.data > floor

    def grad_fn(g):
        return (np.where(mask, g / clipped, 0.0),)

    return _emit("log_clamped", out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def grad_fn(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum_all", np.asarray(a.data.sum()), (a,), grad_fn)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def grad_fn(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean_all", np.asarray(a.data.mean()), (a,), grad_fn)


# ---------------------------------------------------------------------------
# structural ops


def gather_rows(table, ids) -> Tensor:
    """Rows ``table[ids]``; used for token and position embedding lookup."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise AutodiffError("gather_rows expects a 1-D index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise AutodiffError("gather_rows index out of range")
    out = table.data[idx]
    shape = table.data.shape

    def grad_fn(g):
        acc = np.zeros(shape, dtype=np.float64)
        np.add.at(acc, idx, g)
        return (acc,)

    return _emit("gather_rows", out, (table,), grad_fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[:, start:stop]
    shape = a.data.shape

    def grad_fn(g):
        acc = np.zeros(shape, dtype=np.float64)
        acc[:, start:stop] = g
        return (acc,)

    return _emit("slice_cols", out.copy(), (a,), grad_fn)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def grad_fn(g):
        grads = []
        offset = 0
        for w in widths:
            grads.append(g[:, offset:offset + w])
            offset += w
        return tuple(grads)

    return _emit("concat_cols", out, parts, grad_fn)


# ---------------------------------------------------------------------------
# attention-shaped ops: head split/merge, batched matmul, softmax


def split_heads(a, num_heads: int) -> Tensor:
    """(n, d) -> (num_heads, n, d // num_heads)."""
    a = as_tensor(a)
    n, d = a.data.shape
    if d % num_heads != 0:
        raise AutodiffError("width not divisible by head count")
    head_dim = d // num_heads
    out = np.ascontiguousarray(a.data.reshape(n, num_heads, head_dim).transpose(1, 0, 2))

    def grad_fn(g):
        return (g.transpose(1, 0, 2).reshape(n, d),)

    return _emit("split_heads", out, (a,), grad_fn)


def merge_heads(a) -> Tensor:
    """(h, n, head_dim) -> (n, h * head_dim); inverse of :func:`split_heads`."""
    a = as_tensor(a)
    h, n, head_dim = a.data.shape
    out = np.ascontiguousarray(a.data.transpose(1, 0, 2)).reshape(n, h * head_dim)

    def grad_fn(g):
        return (g.reshape(n, h, head_dim).transpose(1, 0, 2),)

    return _emit("merge_heads", out, (a,), grad_fn)


def bmm(a, b, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over a leading batch axis, optionally b^T."""
    a, b = as_tensor(a), as_tensor(b)
    a_data, b_data = a.data, b.data
    out = a_data @ (b_data.swapaxes(-1, -2) if transpose_b else b_data)

    def grad_fn(g):
        if transpose_b:
            return g @ b_data, g.swapaxes(-1, -2) @ a_data
        return g @ b_data.swapaxes(-1, -2), a_data.swapaxes(-1, -2) @ g

    return _emit("bmm", out, (a, b), grad_fn)


def softmax_last(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the trailing axis with optional position mask.

    Masked positions get exactly zero weight and zero gradient. Stabilized by
    max subtraction over the unmasked entries.
    """
    a = as_tensor(a)
    x = a.data
    if x.ndim < 1 or x.shape[-1] < 1 or x.size == 0:
        raise AutodiffError("softmax over an empty axis")
    if not np.all(np.isfinite(x)):
        raise AutodiffError("non-finite input")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (x.shape[-1],):
            raise AutodiffError("mask length mismatch")
        if not mask.any():
            raise AutodiffError("softmax: no attendable position")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):  # inputs near float max shift to -inf, exp -> 0
        e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g, out=out):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax_last", out, (a,), grad_fn)


def softmax_rows(a, col_mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax of a matrix, stabilized by row-max subtraction.

    ``col_mask`` (bool, one entry per column) excludes masked columns: they
    receive exactly zero weight and zero gradient.
    """
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise AutodiffError("softmax_rows expects a matrix")
    return softmax_last(a, mask=col_mask)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row standardization followed by an affine gain/bias.

    Rows are normalized with the population variance; ``d >= 2`` is required
    because a single column has no within-row variance to speak of.
    """
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    if x.ndim != 2:
        raise AutodiffError("layer_norm expects a matrix")
    d = x.shape[1]
    if d < 2:
        raise AutodiffError("layer_norm requires at least 2 features per row")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise AutodiffError("layer_norm gain/bias must have one entry per column")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    g_data = gain.data

    def grad_fn(g):
        gy = g * g_data
        mean_gy = gy.mean(axis=1, keepdims=True)
        mean_gy_xhat = (gy * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gy - mean_gy - xhat * mean_gy_xhat)
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        return dx, dgain, dbias

    return _emit("layer_norm", out, (a, gain, bias), grad_fn)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    theta: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar function of named arrays.

    The deterministic verification oracle for :func:`backward`: perturbs one
    coordinate at a time and evaluates ``(f(x+h) - f(x-h)) / 2h``.
    """
    base = {name: np.array(v, dtype=np.float64) for name, v in theta.items()}
    grads: dict[str, np.ndarray] = {}
    for name, value in base.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(base))
            flat[i] = orig - h
            down = float(f(base))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise AutodiffError("non-finite evaluation in finite_diff_grad")
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(
    analytic: Mapping[str, np.ndarray] | Mapping[str, Tensor],
    numeric: Mapping[str, np.ndarray],
    guard: float = 1e-2,
) -> float:
    """Worst guarded relative error between two gradient maps.

    The denominator is floored at ``guard`` so that coordinates whose true
    gradient is near zero are compared absolutely instead of amplifying
    finite-difference noise.
    """
    worst = 0.0
    for name, a in analytic.items():
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        b = np.asarray(numeric[name])
        denom = np.maximum(guard, np.maximum(np.abs(a), np.abs(b)))
        err = np.abs(a - b) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
