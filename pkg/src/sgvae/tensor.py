"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything is 64-bit: the estimators downstream take ratios of small
probabilities and the oracle comparisons need the headroom. Gradient tracking
is opt-in per tensor (``Tape.watch``); untracked tensors (data, noise) record
nothing and behave as constants. Broadcasting is limited to scalar-against-
tensor; batch dimensions are always handled explicitly by the operations
(``matmul``, ``add_bias``, axis reductions).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor", "Tape", "as_tensor", "backward", "grad_check", "elementwise",
    "matmul", "add", "sub", "mul", "exp", "log", "tanh", "relu", "softplus",
    "negate", "scale", "add_bias", "expand_cols", "reduce_sum", "mean",
    "log_sum_exp", "log_softmax", "softmax", "concat", "stop_gradient",
]


class Tensor:
    """A dense float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError(f"item() on tensor of shape {self.data.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = "tracked" if self.tracked else "const"
        return f"Tensor(shape={self.data.shape}, {tag})"


class Tape:
    """Ordered record of operations; its order is a topological order of the
    recorded computation, so one reverse sweep visits each node exactly once."""

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, Callable]]]] = []

    def watch(self, *tensors: Tensor) -> None:
        """Mark tensors as tracked on this tape (typically the parameters)."""
        for t in tensors:
            t.tape = self

    def record(self, out: Tensor, pulls: list[tuple[Tensor, Callable]]) -> None:
        self._records.append((out, pulls))

    def __len__(self) -> int:
        return len(self._records)


def as_tensor(x) -> Tensor:
    """Coerce an array-like or scalar to an untracked constant Tensor."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands are tracked on different tapes")
    return tape


def _emit(inputs: Sequence[Tensor], data: np.ndarray,
          pulls: list[tuple[Tensor, Callable]]) -> Tensor:
    tape = _common_tape(inputs)
    out = Tensor(data, tape)
    if tape is not None:
        tape.record(out, [(t, f) for (t, f) in pulls if t.tape is not None])
    return out


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape or _is_scalar(a.data) or _is_scalar(b.data):
        return
    raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a gradient onto a scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner extents disagree, {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit([a, b], ad @ bd, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _emit([a, b], a.data + b.data,
                 [(a, lambda g: _reduce_to(g, a.data.shape)),
                  (b, lambda g: _reduce_to(g, b.data.shape))])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _emit([a, b], a.data - b.data,
                 [(a, lambda g: _reduce_to(g, a.data.shape)),
                  (b, lambda g: _reduce_to(-g, b.data.shape))])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit([a, b], ad * bd,
                 [(a, lambda g: _reduce_to(g * bd, ad.shape)),
                  (b, lambda g: _reduce_to(g * ad, bd.shape))])


def exp(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)
    return _emit([t], out, [(t, lambda g: g * out)])


def log(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if np.any(t.data <= 0.0):
        raise DomainError("log of non-positive value")
    td = t.data
    return _emit([t], np.log(td), [(t, lambda g: g / td)])


def tanh(t: Tensor) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.data)
    return _emit([t], out, [(t, lambda g: g * (1.0 - out * out))])


def relu(t: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    t = as_tensor(t)
    mask = t.data > 0.0
    return _emit([t], np.where(mask, t.data, 0.0), [(t, lambda g: g * mask)])


def softplus(t: Tensor) -> Tensor:
    t = as_tensor(t)
    td = t.data
    out = np.logaddexp(0.0, td)
    return _emit([t], out, [(t, lambda g: g / (1.0 + np.exp(-td)))])


def negate(t: Tensor) -> Tensor:
    t = as_tensor(t)
    return _emit([t], -t.data, [(t, lambda g: -g)])


def scale(t: Tensor, c: float) -> Tensor:
    t = as_tensor(t)
    c = float(c)
    return _emit([t], t.data * c, [(t, lambda g: g * c)])


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "exp": exp, "log": log,
    "tanh": tanh, "relu": relu, "softplus": softplus, "negate": negate,
    "scale": scale,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name over the registered elementwise operations."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias add: m[R,C] + b[C]. The explicit batch-axis op."""
    m, b = as_tensor(m), as_tensor(b)
    if m.data.ndim != 2 or b.data.ndim != 1 or m.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias: {m.data.shape} + {b.data.shape}")
    return _emit([m, b], m.data + b.data,
                 [(m, lambda g: g), (b, lambda g: g.sum(axis=0))])


def expand_cols(t: Tensor, n: int) -> Tensor:
    """Tile a [B,1] column across n columns -> [B,n]. The explicit
    sample-axis broadcast op (gradient sums the columns back)."""
    t = as_tensor(t)
    if t.data.ndim != 2 or t.data.shape[1] != 1:
        raise DimensionError(f"expand_cols needs a [B,1] column, got {t.data.shape}")
    out = np.broadcast_to(t.data, (t.data.shape[0], n)).copy()
    return _emit([t], out, [(t, lambda g: g.sum(axis=1, keepdims=True))])


# ---------------------------------------------------------------------------
# reductions and normalizers

def _check_axis(t: Tensor, axis: int) -> int:
    if not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {t.data.shape}")
    axis = axis % t.data.ndim
    if t.data.shape[axis] == 0:
        raise DomainError(f"empty extent along axis {axis}")
    return axis


def reduce_sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    shape = t.data.shape
    if axis is None:
        out = np.sum(t.data)
        return _emit([t], out, [(t, lambda g: np.broadcast_to(g, shape).astype(np.float64))])
    ax = _check_axis(t, axis)
    out = np.sum(t.data, axis=ax, keepdims=keepdims)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return np.broadcast_to(g, shape).astype(np.float64)

    return _emit([t], out, [(t, pull)])


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    n = t.data.size if axis is None else t.data.shape[_check_axis(t, axis)]
    if n == 0:
        raise DomainError("mean over zero elements")
    return scale(reduce_sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def log_sum_exp(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """max + log(sum(exp(t - max))); finite for any finite input."""
    t = as_tensor(t)
    ax = _check_axis(t, axis)
    m = np.max(t.data, axis=ax, keepdims=True)
    out = m + np.log(np.sum(np.exp(t.data - m), axis=ax, keepdims=True))
    soft = np.exp(t.data - out)  # softmax along ax
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def pull(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return soft * g

    return _emit([t], out, [(t, pull)])


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    ax = _check_axis(t, axis)
    m = np.max(t.data, axis=ax, keepdims=True)
    lse = m + np.log(np.sum(np.exp(t.data - m), axis=ax, keepdims=True))
    out = t.data - lse
    p = np.exp(out)
    return _emit([t], out,
                 [(t, lambda g: g - p * np.sum(g, axis=ax, keepdims=True))])


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = as_tensor(t)
    ax = _check_axis(t, axis)
    m = np.max(t.data, axis=ax, keepdims=True)
    e = np.exp(t.data - m)
    p = e / np.sum(e, axis=ax, keepdims=True)
    return _emit([t], p,
                 [(t, lambda g: p * (g - np.sum(g * p, axis=ax, keepdims=True)))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    ax = _check_axis(tensors[0], axis)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    pulls = []
    start = 0
    for t in tensors:
        stop = start + t.data.shape[ax]
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(start, stop)
        pulls.append((t, lambda g, idx=tuple(idx): g[idx]))
        start = stop
    return _emit(tensors, out, pulls)


def stop_gradient(t: Tensor) -> Tensor:
    """Same values, no gradient flow (used by the detached-weights ablation)."""
    return Tensor(np.array(as_tensor(t).data, copy=True))


# ---------------------------------------------------------------------------
# reverse pass

def backward(output: Tensor) -> None:
    """Populate .grad of every tracked ancestor with d(output)/d(ancestor).

    Repeated calls without zero_grad accumulate.
    """
    if output.tape is None:
        raise ContractError("backward on an untracked tensor")
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {output.data.shape}")
    adjoint: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    holders: dict[int, Tensor] = {id(output): output}
    for out, pulls in reversed(output.tape._records):
        g = adjoint.get(id(out))
        if g is None:
            continue
        for inp, pull in pulls:
            contrib = pull(g)
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = np.array(contrib, dtype=np.float64, copy=True)
                holders[key] = inp
    for key, t in holders.items():
        t.grad = adjoint[key] if t.grad is None else t.grad + adjoint[key]


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central|).

    ``f`` must be scalar-valued; it is evaluated 1 + 2*x.size times.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64, copy=True)
    tape = Tape()
    xt = Tensor(base.copy())
    tape.watch(xt)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        xp = base.copy()
        xp.reshape(-1)[i] += eps
        xm = base.copy()
        xm.reshape(-1)[i] -= eps
        fp = f(Tensor(xp)).data.reshape(-1)[0]
        fm = f(Tensor(xm)).data.reshape(-1)[0]
        flat[i] = (fp - fm) / (2.0 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(rel)) if rel.size else 0.0
