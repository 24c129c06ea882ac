"""Dense float32 tensors with a reverse-mode tape.

Ops record themselves on the innermost active :class:`Tape` when at least one
input requires a gradient. Outside a tape every op is a plain numpy call, which
is how inference and tracing run.

    with Tape() as tape:
        loss = cross_entropy(x @ w, targets)
    grads = backward(loss, tape)
    grads[w]
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float32
LAYERNORM_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TensorError(Exception):
    pass


class DimensionError(TensorError, ValueError):
    pass


class NumericError(TensorError, ArithmeticError):
    pass


class GraphError(TensorError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


@dataclass
class Record:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops, rebuilt for every forward pass."""

    _local = threading.local()

    def __init__(self):
        self.records: list[Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, rec: Record) -> None:
        self.records.append(rec)
        self._outputs.add(id(rec.out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def __len__(self) -> int:
        return len(self.records)


class Gradients(Mapping):
    """Gradient map keyed by tensor identity; absent tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros(t.shape, dtype=DTYPE)
        return g

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and self._tensors.get(id(t)) is t

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)


def backward(loss: Tensor, tape: Tape) -> Gradients:
    if loss.data.size != 1:
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise GraphError("loss was not produced by an op recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=DTYPE)
            if gi.shape != t.shape:
                gi = _unbroadcast(gi, t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                tensors[key] = t
    return Gradients(grads, tensors)


# ---------------------------------------------------------------- helpers


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{op}: non-finite values")


def _emit(op: str, data: np.ndarray, inputs: Iterable, fn) -> Tensor:
    inputs = tuple(inputs)
    tape = Tape.current()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(Record(op, out, tuple(_as_tensor(t) for t in inputs), fn))
    return out


def _broadcast_check(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    x, y = _as_array(a), _as_array(b)
    _broadcast_check("add", x, y)
    return _emit("add", x + y, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    x, y = _as_array(a), _as_array(b)
    _broadcast_check("sub", x, y)
    return _emit("sub", x - y, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    x, y = _as_array(a), _as_array(b)
    _broadcast_check("mul", x, y)
    return _emit("mul", x * y, (a, b), lambda g: (g * y, g * x))


def div(a, b) -> Tensor:
    x, y = _as_array(a), _as_array(b)
    _broadcast_check("div", x, y)
    return _emit("div", x / y, (a, b), lambda g: (g / y, -g * x / (y * y)))


def neg(a) -> Tensor:
    return _emit("neg", -_as_array(a), (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    x, y = _as_array(a), _as_array(b)
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {x.shape} by {y.shape}")

    def grad(g):
        ga = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2 and x.ndim > 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return _emit("matmul", x @ y, (a, b), grad)


def log(a) -> Tensor:
    x = _as_array(a)
    _check_finite("log", x)
    if (x <= 0).any():
        raise NumericError("log: non-positive input")
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    x = _as_array(a)
    _check_finite("exp", x)
    out = np.exp(x)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def _erf(x: np.ndarray) -> np.ndarray:
    # Abramowitz & Stegun 7.1.26, |error| < 1.5e-7: below float32 resolution of
    # the GELU output and ~2.5x faster than scipy.special.erf on large arrays.
    ax = np.abs(x)
    t = 1.0 / (1.0 + 0.3275911 * ax)
    poly = ((((1.061405429 * t - 1.453152027) * t + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t
    return np.copysign(1.0 - poly * np.exp(-ax * ax), x)


def gelu(a) -> Tensor:
    """Exact-form GELU, x * Phi(x)."""
    x = _as_array(a)
    _check_finite("gelu", x)
    cdf = (0.5 * (1.0 + _erf(x / DTYPE(_SQRT2)))).astype(DTYPE)

    def grad(g):
        pdf = (_INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(DTYPE)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", x * cdf, (a,), grad)


def softmax(a, axis: int = -1) -> Tensor:
    x = _as_array(a)
    _check_finite("softmax", x)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (a,), grad)


def softmax_rows(a) -> Tensor:
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    x = _as_array(a)
    _check_finite("log_softmax", x)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layernorm(a, gamma, beta, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, w, b = _as_array(a), _as_array(gamma), _as_array(beta)
    _check_finite("layernorm", x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = xc * inv
    n = x.shape[-1]

    def grad(g):
        gx_hat = g * w
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", xhat * w + b, (a, gamma, beta), grad)


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    x = _as_array(logits)
    t = np.asarray(targets, dtype=np.int64)
    if x.ndim != 2 or t.shape != (x.shape[0],):
        raise DimensionError(f"cross_entropy: logits {x.shape} vs targets {t.shape}")
    if (t < 0).any() or (t >= x.shape[1]).any():
        raise IndexError("cross_entropy: target id out of range")
    _check_finite("cross_entropy", x)
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = np.float32((lse - shifted[rows, t]).mean())

    def grad(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / len(t)),)

    return _emit("cross_entropy", np.asarray(loss, dtype=DTYPE), (logits,), grad)


# ---------------------------------------------------------------- shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_array(a)
    out = x.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", out, (a,), grad)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    total = tsum(a, axis=axis, keepdims=keepdims)
    n = _as_array(a).size // max(total.data.size, 1)
    return mul(total, 1.0 / n)


def reshape(a, shape) -> Tensor:
    x = _as_array(a)
    try:
        out = x.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _emit("reshape", out, (a,), lambda g: (g.reshape(x.shape),))


def swapaxes(a, i: int, j: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(_as_array(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    x = _as_array(a)
    out = x[index]

    def grad(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("take", np.array(out, dtype=DTYPE), (a,), grad)


def embedding(table, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    w = _as_array(table)
    if (ids < 0).any() or (ids >= w.shape[0]).any():
        raise IndexError("embedding: id out of range")
    return take(table, ids)


def where(mask, a, b) -> Tensor:
    """Pick ``a`` where ``mask`` is true, else ``b``. The mask is a constant."""
    m = np.asarray(mask, dtype=bool)
    x, y = _as_array(a), _as_array(b)
    out = np.where(m, x, y).astype(DTYPE)
    return _emit("where", out, (a, b), lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    arrays = [_as_array(t) for t in tensors]
    sizes = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return _emit("concat", np.concatenate(arrays, axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------- optimizers


def _check_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; step refused")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    _check_step(params, grads)
    return {k: (p - DTYPE(lr) * grads[k]).astype(DTYPE) if k in grads else p for k, p in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict | None = None
    v: dict | None = None


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float | None = None) -> dict[str, np.ndarray]:
    """One Adam update. Mutates ``state`` only after all gradients pass the checks."""
    _check_step(params, grads)
    if state.m is None:
        state.m, state.v = {}, {}
    state.t += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p
            continue
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m.astype(DTYPE), v.astype(DTYPE)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[k] = (p - step).astype(DTYPE)
    return out
