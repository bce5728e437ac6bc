"""Dense 2-D tensors with a reverse-mode gradient tape.

Every tensor is a float64 matrix. Operations on tensors that belong to a
:class:`GradTape` are recorded in call order together with a closure that maps
the output gradient to parent gradients; :func:`backward` replays them in
reverse.  Tensors created without a tape are constants and are never
differentiated.

Broadcasting is limited to adding/subtracting a ``1 x n`` row vector to an
``m x n`` matrix (bias addition).
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "tape", "node_id", "parents", "_backward", "name")

    def __init__(self, data, name: str | None = None) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.tape: GradTape | None = None
        self.node_id: int | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, node={self.node_id})"

    # operator sugar for the common cases
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class GradTape:
    """Ordered record of differentiable operations.

    Node ids are assigned in recording order, which is also a topological
    order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register ``value`` as a leaf whose gradient will be reported."""
        t = Tensor(value.data if isinstance(value, Tensor) else value, name=name)
        self._append(t)
        self.leaves.append(t)
        return t

    def _append(self, t: Tensor) -> None:
        t.tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(t)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.tape = None
    out.node_id = None
    out.parents = ()
    out._backward = None
    out.name = None
    tape = None
    for p in parents:
        if p.tape is None:
            continue
        if tape is None:
            tape = p.tape
        elif p.tape is not tape:
            raise ValueError("operands are recorded on different tapes")
    if tape is not None:
        out.parents = tuple(parents)
        out._backward = backward
        tape._append(out)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every watched leaf.

    Leaves that do not influence the loss get a zero gradient.  The result is
    ordered by leaf registration.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node_id is None:
        raise ValueError("loss is not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        del grads[node.node_id]
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or parent.tape is not tape:
                continue
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg
    return {
        leaf: grads.get(leaf.node_id, np.zeros_like(leaf.data)) for leaf in tape.leaves
    }


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    av, bv = a.data, b.data
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _row_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if b.shape == (1, a.shape[1]):
        return True
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a ``1 x n`` row added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _row_broadcast(a, b, "add")

    def grad(g):
        return g, (g.sum(axis=0, keepdims=True) if bcast else g)

    return _result(a.data + b.data, (a, b), grad)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = _row_broadcast(a, b, "sub")

    def grad(g):
        return g, -(g.sum(axis=0, keepdims=True) if bcast else g)

    return _result(a.data - b.data, (a, b), grad)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    av, bv = a.data, b.data
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, s: float) -> Tensor:
    return _result(a.data + float(s), (a,), lambda g: (g,))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    if np.isnan(a.data).any():
        raise NonFiniteError("softmax_rows: NaN input")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (a,), grad)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    ``gamma`` and ``beta`` are ``1 x d`` rows.
    """
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ValueError(
            f"layer_norm: gamma/beta must be (1, {d}), got {gamma.shape}, {beta.shape}"
        )
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.data

    def grad(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return (
            dx,
            (g * xhat).sum(axis=0, keepdims=True),
            g.sum(axis=0, keepdims=True),
        )

    return _result(xhat * gv + beta.data, (a, gamma, beta), grad)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
    t = np.tanh(inner)

    def grad(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(0.5 * x * (1.0 + t), (a,), grad)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _result(np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient passes only where the input is inside."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: nothing to concatenate")
    ncol = parts[0].shape[1]
    if any(p.shape[1] != ncol for p in parts):
        raise ValueError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def grad(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, grad)


def concat_cols(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols: nothing to concatenate")
    nrow = parts[0].shape[0]
    if any(p.shape[0] != nrow for p in parts):
        raise ValueError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, grad)


def _checked_range(start: int, stop: int, n: int, op: str) -> None:
    if not 0 <= start < stop <= n:
        raise ValueError(f"{op}: range [{start}, {stop}) outside 0..{n}")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _checked_range(start, stop, a.shape[0], "slice_rows")
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), (a,), grad)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _checked_range(start, stop, a.shape[1], "slice_cols")
    shape = a.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _result(a.data[:, start:stop].copy(), (a,), grad)


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-5
) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``f`` maps a tensor shaped like ``x`` to a 1x1 tensor.  The relative error
    of each coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    base = base.reshape(Tensor(base).shape)

    tape = GradTape()
    xt = tape.watch(base)
    out = f(xt)
    if out.shape != (1, 1):
        raise ValueError(f"finite_diff_check: f must be scalar-valued, got {out.shape}")
    analytic = backward(tape, out)[xt]

    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        numeric[idx] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
