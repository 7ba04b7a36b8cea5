"""Dense tensors with reverse-mode differentiation.

This is the numeric substrate for the whole pipeline: a flat set of array
primitives, each paired with a hand-derived adjoint, recorded on an explicit
tape and replayed in reverse. It is deliberately small. There is no general
broadcasting engine and no kernel fusion, just the operations the instance
aggregation model needs, every one of them checkable against central finite
differences through `finite_diff_check`.

Conventions:

* 64-bit floats by default; 32-bit is available by constructing tensors with
  an explicit dtype (see `resolve_dtype`).
* A primitive records itself only while a `Tape` is active (see `recording`)
  and only when at least one input participates in differentiation.
* Gradients accumulate additively: a tensor consumed twice receives the sum
  of both adjoint contributions. Parameter tensors are created with a zeroed
  gradient slot and are reset explicitly with `zero_grads`.
* A tape replays once. Calling `backward` on a consumed tape raises
  `TapeStateError` instead of silently double-counting.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    TapeStateError,
    ValidationError,
)

DEFAULT_DTYPE = np.float64

_PRECISIONS = {"f64": np.float64, "f32": np.float32}


def resolve_dtype(precision: str) -> np.dtype:
    """Map a config precision string ('f64' or 'f32') to a numpy dtype."""
    try:
        return np.dtype(_PRECISIONS[precision])
    except KeyError:
        raise ValidationError(
            f"unknown precision {precision!r}; expected one of {sorted(_PRECISIONS)}"
        ) from None


class Tensor:
    """A dense array with an optional gradient slot.

    `data` is always a numpy float array. `grad` is either None or an array
    of the same shape. Tensors are treated as immutable by the primitives;
    only the optimizer mutates parameter data in place, between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def reset_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def parameter(data, dtype=None) -> Tensor:
    """A trainable tensor: requires_grad set, gradient slot zero-initialized."""
    t = Tensor(data, requires_grad=True, dtype=dtype)
    t.grad = np.zeros_like(t.data)
    return t


def zero_grads(tensors: Iterable[Tensor]) -> None:
    """Explicit gradient reset between optimization steps."""
    for t in tensors:
        t.reset_grad()


# === tape ===

class Tape:
    """Ordered record of executed primitives for one forward pass.

    Reverse-mode differentiation replays the record back to front,
    accumulating adjoints into input tensors. One tape per bag forward;
    never share a tape across concurrent forwards.
    """

    __slots__ = ("_nodes", "_consumed")

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed


_state = threading.local()


def active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


@contextmanager
def recording(tape: Tape):
    """Make `tape` the active record for primitives executed in the body."""
    prev = active_tape()
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


def make_output(data: np.ndarray, inputs: Sequence[Tensor]) -> Tensor:
    """Wrap a primitive's result, propagating participation in the tape."""
    rg = active_tape() is not None and any(t.requires_grad for t in inputs)
    return Tensor(data, requires_grad=rg, dtype=data.dtype)


def record(out: Tensor, pull: Callable[[np.ndarray], None]) -> None:
    """Append one executed primitive to the active tape, if any.

    `pull` receives dL/d(out) and must push contributions into the inputs'
    gradient slots via `accumulate`. Custom primitives outside this module
    (the selective scan, the neighbor aggregation) register through this
    same hook.
    """
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, pull))


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an adjoint contribution to a tensor's gradient slot."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay the tape in reverse, seeding d(loss)/d(loss) = 1.

    The loss must be a scalar produced by an operation recorded on `tape`.
    A second call on the same tape raises `TapeStateError`.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise TapeStateError("backward already ran on this tape; record a fresh one")
    if tape._nodes and not any(out is loss for out, _ in tape._nodes):
        raise ValidationError("backward: loss was not produced by this tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, pull in reversed(tape._nodes):
        if out.grad is None:
            continue
        pull(out.grad)


# === primitives ===

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of row vectors: (M, Din) @ (Din, Dout) + (Dout,)."""
    xd, wd, bd = x.data, w.data, b.data
    if (
        xd.ndim != 2
        or wd.ndim != 2
        or bd.ndim != 1
        or xd.shape[1] != wd.shape[0]
        or wd.shape[1] != bd.shape[0]
    ):
        raise DimensionError(
            f"linear: incompatible shapes x{xd.shape}, w{wd.shape}, b{bd.shape}"
        )
    out = make_output(xd @ wd + bd, (x, w, b))

    def pull(g: np.ndarray) -> None:
        accumulate(x, g @ wd.T)
        accumulate(w, xd.T @ g)
        accumulate(b, g.sum(axis=0))

    record(out, pull)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    out = make_output(ad @ bd, (a, b))

    def pull(g: np.ndarray) -> None:
        accumulate(a, g @ bd.T)
        accumulate(b, ad.T @ g)

    record(out, pull)
    return out


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{name}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = make_output(a.data + b.data, (a, b))

    def pull(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, g)

    record(out, pull)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = make_output(a.data - b.data, (a, b))

    def pull(g: np.ndarray) -> None:
        accumulate(a, g)
        accumulate(b, -g)

    record(out, pull)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shaped tensors."""
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    out = make_output(ad * bd, (a, b))

    def pull(g: np.ndarray) -> None:
        accumulate(a, g * bd)
        accumulate(b, g * ad)

    record(out, pull)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = make_output(x.data * c, (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, g * c)

    record(out, pull)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = make_output(x.data + float(c), (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, g)

    record(out, pull)
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


# stable scalar kernels shared by several primitives

def _sigmoid(v: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _softplus(v: np.ndarray) -> np.ndarray:
    # max(v, 0) + log1p(exp(-|v|)) never overflows
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _unary(x: Tensor, fn, dfn) -> Tensor:
    out = make_output(fn(x.data), (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, g * dfn(x.data, out.data))

    record(out, pull)
    return out


def relu(x: Tensor) -> Tensor:
    # adjoint at exactly 0 is 0
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(v.dtype))


def tanh(x: Tensor) -> Tensor:
    return _unary(x, np.tanh, lambda v, o: 1.0 - o * o)


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp, lambda v, o: o)


def sigmoid(x: Tensor) -> Tensor:
    return _unary(x, _sigmoid, lambda v, o: o * (1.0 - o))


def softplus(x: Tensor) -> Tensor:
    return _unary(x, _softplus, lambda v, o: _sigmoid(v))


def silu(x: Tensor) -> Tensor:
    def d(v, o):
        s = _sigmoid(v)
        return s * (1.0 + v * (1.0 - s))

    return _unary(x, lambda v: v * _sigmoid(v), d)


ELEMENTWISE: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "silu": silu,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "sigmoid": sigmoid,
}


def elementwise(op: str, x: Tensor) -> Tensor:
    """Dispatch an elementwise activation by name."""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValidationError(
            f"elementwise: unknown op {op!r}; expected one of {sorted(ELEMENTWISE)}"
        ) from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis; rows sum to one."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {xd.shape}")
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    out_d = e / e.sum(axis=axis, keepdims=True)
    out = make_output(out_d, (x,))

    def pull(g: np.ndarray) -> None:
        dot = (g * out_d).sum(axis=axis, keepdims=True)
        accumulate(x, out_d * (g - dot))

    record(out, pull)
    return out


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) of a 1-D tensor, max-shifted; returns a scalar."""
    xd = x.data
    if xd.ndim != 1 or xd.size == 0:
        raise DimensionError(f"logsumexp: need a non-empty 1-D tensor, got shape {xd.shape}")
    m = xd.max()
    e = np.exp(xd - m)
    out = make_output(np.asarray(m + np.log(e.sum()), dtype=xd.dtype), (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, float(g) * (e / e.sum()))

    record(out, pull)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization of a 2-D tensor over its last axis."""
    xd, gd, bd = x.data, gamma.data, beta.data
    if xd.ndim != 2 or gd.shape != (xd.shape[1],) or bd.shape != (xd.shape[1],):
        raise DimensionError(
            f"layer_norm: incompatible shapes x{xd.shape}, gamma{gd.shape}, beta{bd.shape}"
        )
    if eps <= 0:
        raise ValidationError("layer_norm: eps must be positive")
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = make_output(xhat * gd + bd, (x, gamma, beta))

    def pull(g: np.ndarray) -> None:
        accumulate(beta, g.sum(axis=0))
        accumulate(gamma, (g * xhat).sum(axis=0))
        dxh = g * gd
        accumulate(
            x,
            inv
            * (
                dxh
                - dxh.mean(axis=1, keepdims=True)
                - xhat * (dxh * xhat).mean(axis=1, keepdims=True)
            ),
        )

    record(out, pull)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d scalar tensor."""
    out = make_output(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, np.full_like(x.data, float(g)))

    record(out, pull)
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select along axis 0 by an index vector; adjoint scatter-adds back.

    Works for any rank >= 1; with a permutation index this is a row
    reordering, with repeats it duplicates rows (the adjoint then sums).
    """
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"gather_rows: index out of range for axis length {n}")
    out = make_output(np.take(x.data, idx, axis=0), (x,))

    def pull(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        accumulate(x, dx)

    record(out, pull)
    return out


def flip0(x: Tensor) -> Tensor:
    """Reverse along axis 0 (a fixed permutation, so gather handles it)."""
    n = x.data.shape[0]
    return gather_rows(x, np.arange(n - 1, -1, -1))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.data.shape} as {tuple(shape)}") from None
    out = make_output(data, (x,))

    def pull(g: np.ndarray) -> None:
        accumulate(x, np.asarray(g).reshape(x.data.shape))

    record(out, pull)
    return out


def stack0(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    if not tensors:
        raise ValidationError("stack0: need at least one tensor")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise DimensionError(f"stack0: shapes {shape} and {t.data.shape} differ")
    out = make_output(np.stack([t.data for t in tensors], axis=0), tuple(tensors))

    def pull(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            accumulate(t, g[i])

    record(out, pull)
    return out


def index0(x: Tensor, i: int) -> Tensor:
    """Take one slice along axis 0; adjoint scatters into a zero tensor."""
    n = x.data.shape[0]
    if not 0 <= i < n:
        raise ValidationError(f"index0: index {i} out of range for axis length {n}")
    out = make_output(x.data[i], (x,))

    def pull(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[i] = g
        accumulate(x, dx)

    record(out, pull)
    return out


# === gradient checking ===

def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of `f` at `x` against central differences.

    `f` must be a deterministic scalar-valued function built from the
    primitives in this package. Returns the worst semi-relative
    disagreement over (optionally sampled) input entries:

        max_j |analytic_j - numeric_j| / max(1, |numeric_j|)

    Checks run in 64-bit regardless of the input dtype.
    """
    base = np.array(x.data, dtype=np.float64)
    var = Tensor(base.copy(), requires_grad=True)
    tape = Tape()
    with recording(tape):
        out = f(var)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValidationError("finite_diff_check: f must return a scalar Tensor")
    backward(out, tape)
    analytic = (var.grad if var.grad is not None else np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    n = flat.size
    if max_entries is not None and n > max_entries:
        picker = rng if rng is not None else np.random.default_rng(0)
        entries = np.sort(picker.choice(n, size=max_entries, replace=False))
    else:
        entries = np.arange(n)

    def value_at(vec: np.ndarray) -> float:
        out = f(Tensor(vec.reshape(base.shape)))
        return float(out.data)

    worst = 0.0
    for j in entries:
        up = flat.copy()
        up[j] += h
        down = flat.copy()
        down[j] -= h
        numeric = (value_at(up) - value_at(down)) / (2.0 * h)
        err = abs(analytic[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
