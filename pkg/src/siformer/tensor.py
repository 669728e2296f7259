"""Small dense tensor type with a reverse-mode gradient engine.

Everything is float64 and two-dimensional unless noted. Broadcasting is
limited to adding/multiplying a row vector (1 x n) or a column vector
(m x 1) onto an m x n matrix; any other shape mix raises ``ShapeError``.

The graph is recorded while operations run (one tape per forward pass)
and :func:`backward` walks it in reverse topological order. Leaf tensors
with ``requires_grad=True`` accumulate into ``.grad`` across calls until
:func:`zero_grad` clears them.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "as_tensor",
    "custom_op",
    "no_grad",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "sum_all",
    "mean_rows",
    "exp",
    "log",
    "relu",
    "gelu",
    "elu",
    "softmax_rows",
    "log_softmax_rows",
    "cross_entropy",
    "layer_norm",
    "linear",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "maxpool_rows",
    "GradCheckReport",
    "grad_check",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / float(other))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``grad_fn(g)`` receives the upstream gradient (same shape as ``data``)
    and returns one gradient array (or None) per parent. It is only stored
    when recording is on and some parent requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on.

    Gradients accumulate: calling twice without :func:`zero_grad` doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the tape (no input requires grad)")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------- shape helpers


def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected a 2-D tensor, got shape {x.shape}")


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    """Classify how ``b`` combines with ``a``."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "scalar"
    if a.ndim == 2 and b.ndim == 2:
        m, n = a.shape
        if b.shape == (1, n):
            return "row"
        if b.shape == (m, 1):
            return "col"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "row":
        return g.sum(axis=0, keepdims=True)
    if kind == "col":
        return g.sum(axis=1, keepdims=True)
    return np.asarray(g.sum())


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def grad_fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return custom_op(A @ B, (a, b), grad_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        kind = _broadcast_kind(a.data, b.data, "add")
    except ShapeError:
        # vector + matrix: swap so the matrix comes first
        kind = _broadcast_kind(b.data, a.data, "add")
        a, b = b, a

    def grad_fn(g):
        return g, _reduce_to(g, kind)

    return custom_op(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.data, b.data, "sub")

    def grad_fn(g):
        return g, -_reduce_to(g, kind)

    return custom_op(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    """Elementwise product (same shape, or row/column-vector broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        kind = _broadcast_kind(a.data, b.data, "mul")
    except ShapeError:
        kind = _broadcast_kind(b.data, a.data, "mul")
        a, b = b, a
    A, B = a.data, b.data

    def grad_fn(g):
        return g * B, _reduce_to(g * A, kind)

    return custom_op(A * B, (a, b), grad_fn)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return custom_op(x.data * c, (x,), lambda g: (g * c,))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    _require_2d(x, "transpose")
    return custom_op(x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_rows(x) -> Tensor:
    """Column-wise mean: m x n -> 1 x n."""
    x = as_tensor(x)
    _require_2d(x, "mean_rows")
    m = x.shape[0]
    return custom_op(x.data.mean(axis=0, keepdims=True), (x,),
                     lambda g: (np.repeat(g / m, m, axis=0),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return custom_op(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return custom_op(np.log(X), (x,), lambda g: (g / X,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return custom_op(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation (smooth everywhere)."""
    x = as_tensor(x)
    X = x.data
    inner = _GELU_C * (X + 0.044715 * X**3)
    th = np.tanh(inner)
    y = 0.5 * X * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * X**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th**2) * dinner),)

    return custom_op(y, (x,), grad_fn)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    X = x.data
    neg = X <= 0
    e = np.exp(np.minimum(X, 0.0))
    y = np.where(neg, alpha * (e - 1.0), X)
    return custom_op(y, (x,), lambda g: (g * np.where(neg, alpha * e, 1.0),))


def _check_finite(X: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{op}: non-finite input")


def _softmax_data(X: np.ndarray, col_mask: np.ndarray | None) -> np.ndarray:
    if col_mask is not None:
        X = np.where(col_mask[None, :], X, -np.inf)
    Z = X - X.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def softmax_rows(x, col_mask=None) -> Tensor:
    """Row-wise softmax, stabilised by subtracting each row's max.

    ``col_mask`` (bool, length n) excludes columns: they get probability 0.
    """
    x = as_tensor(x)
    _require_2d(x, "softmax_rows")
    _check_finite(x.data, "softmax_rows")
    if col_mask is not None:
        col_mask = np.asarray(col_mask, dtype=bool)
        if col_mask.shape != (x.shape[1],):
            raise ShapeError(f"softmax_rows: mask shape {col_mask.shape} vs {x.shape}")
        if not col_mask.any():
            raise ValueError("softmax_rows: every column is masked")
    P = _softmax_data(x.data, col_mask)

    def grad_fn(g):
        return (P * (g - (g * P).sum(axis=1, keepdims=True)),)

    return custom_op(P, (x,), grad_fn)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    _require_2d(x, "log_softmax_rows")
    _check_finite(x.data, "log_softmax_rows")
    Z = x.data - x.data.max(axis=1, keepdims=True)
    L = Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))
    P = np.exp(L)
    return custom_op(L, (x,), lambda g: (g - P * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single 1 x C (or length-C) logit row."""
    logits = as_tensor(logits)
    row = logits.data.reshape(1, -1)
    C = row.shape[1]
    if not 0 <= int(label) < C:
        raise ValueError(f"label {label} out of range for {C} classes")
    _check_finite(row, "cross_entropy")
    shift = row - row.max()
    lse = math.log(np.exp(shift).sum())
    loss = lse - shift[0, label]
    P = np.exp(shift - lse)
    onehot = np.zeros_like(P)
    onehot[0, label] = 1.0
    shape = logits.shape

    def grad_fn(g):
        return ((float(g) * (P - onehot)).reshape(shape),)

    return custom_op(np.asarray(loss), (logits,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _require_2d(x, "layer_norm")
    n = x.shape[1]
    if gamma.shape != (1, n) or beta.shape != (1, n):
        raise ShapeError(f"layer_norm: gamma/beta must be (1, {n})")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def grad_fn(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return custom_op(xhat * G + beta.data, (x, gamma, beta), grad_fn)


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` with ``b`` a (1 x n) row, fused into one tape node."""
    x, W = as_tensor(x), as_tensor(W)
    _require_2d(x, "linear")
    _require_2d(W, "linear")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: {x.shape} @ {W.shape}")
    X, Wd = x.data, W.data
    out = X @ Wd
    if b is None:
        return custom_op(out, (x, W), lambda g: (
            g @ Wd.T if x.requires_grad else None, X.T @ g if W.requires_grad else None))
    b = as_tensor(b)
    if b.shape != (1, W.shape[1]):
        raise ShapeError(f"linear: bias shape {b.shape}, expected (1, {W.shape[1]})")

    def grad_fn(g):
        return (g @ Wd.T if x.requires_grad else None,
                X.T @ g if W.requires_grad else None,
                g.sum(axis=0, keepdims=True))

    return custom_op(out + b.data, (x, W, b), grad_fn)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def grad_fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return custom_op(np.concatenate([p.data for p in parts], axis=0), parts, grad_fn)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return custom_op(np.concatenate([p.data for p in parts], axis=1), parts, grad_fn)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return custom_op(x.data[start:stop].copy(), (x,), grad_fn)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return custom_op(x.data[:, start:stop].copy(), (x,), grad_fn)


def maxpool_rows(x, window: int = 3, stride: int = 2) -> Tensor:
    """Max over row windows centred on rows 0, stride, 2*stride, ...

    Windows are clipped at the edges (same padding with -inf), so the
    output has ceil(m / stride) rows.
    """
    x = as_tensor(x)
    _require_2d(x, "maxpool_rows")
    X = x.data
    m = X.shape[0]
    half = window // 2
    centres = range(0, m, stride)
    out = np.empty((len(centres), X.shape[1]))
    arg = np.empty(out.shape, dtype=int)
    for j, c in enumerate(centres):
        lo, hi = max(0, c - half), min(m, c + half + 1)
        block = X[lo:hi]
        k = block.argmax(axis=0)
        arg[j] = lo + k
        out[j] = block[k, np.arange(X.shape[1])]
    cols = np.arange(X.shape[1])

    def grad_fn(g):
        dx = np.zeros_like(X)
        for j in range(out.shape[0]):
            np.add.at(dx, (arg[j], cols), g[j])
        return (dx,)

    return custom_op(out, (x,), grad_fn)


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    evaluations: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def failures(self) -> list[str]:
        return [k for k, v in self.per_param.items() if not v < self.tol]


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
               eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f`` is re-evaluated with each scalar of each parameter nudged by
    +/- ``eps`` (parameters are mutated in place and restored). Relative
    error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    zero_grad(params)
    loss = f()
    if not np.isfinite(loss.data).all():
        raise ValueError("grad_check: non-finite loss")
    backward(loss)
    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    with no_grad():
        for name, p in params.items():
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f().item()
                flat[i] = orig - eps
                lo = f().item()
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise ValueError(f"grad_check: non-finite evaluation at {name}[{i}]")
                num = (hi - lo) / (2 * eps)
                a = float(analytic.reshape(-1)[i])
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, rel)
                report.evaluations += 2
            report.per_param[name] = worst
            report.max_rel_error = max(report.max_rel_error, worst)
    return report
