"""Small dense tensor kernel with tape-based reverse-mode differentiation.

Everything runs in float64 on numpy arrays. Operations record themselves on
the active :class:`Tape` only when at least one input requires a gradient, so
inference code pays nothing for the machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return swap_last(self)


class Tape:
    """Records primitive ops in execution order for one backward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on the scalar output.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, out: Tensor) -> None:
        if out.data.size != 1:
            raise ValueError("backward needs a scalar output")
        out.grad = np.ones_like(out.data)
        # nodes are appended after their parents, so reverse order is topological
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def no_tape() -> bool:
    return not _TAPES


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(_check(data, op))
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _TAPES[-1].nodes.append(out)
    return out


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        _accum(x, g * out)

    return _make(out, (x,), backward, "exp")


def log1p(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, g / (1.0 + x.data))

    return _make(np.log1p(x.data), (x,), backward, "log1p")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        _accum(x, g * 0.5 / out)

    return _make(out, (x,), backward, "sqrt")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def backward(g):
        _accum(x, g * on)

    return _make(np.where(on, x.data, 0.0), (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), backward, "gelu")


# -- shape -----------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def gather_rows(table: Tensor, ids) -> Tensor:
    """``table[ids]`` for an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, full)

    return _make(table.data[ids], (table,), backward, "gather_rows")


# -- reductions ------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def masked_max(x: Tensor, valid, axis: int) -> Tensor:
    """Max over ``axis`` considering only positions where ``valid`` is true.

    ``valid`` broadcasts against ``x``. Every reduced slice needs at least one
    valid entry. Gradient goes to the first maximal entry.
    """
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    if not np.all(valid.any(axis=axis)):
        raise ValueError("masked_max: a slice has no valid positions")
    filled = np.where(valid, x.data, -np.inf)
    idx = np.expand_dims(filled.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        _accum(x, full)

    return _make(out, (x,), backward, "masked_max")


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: width {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis. ``additive_mask`` is a constant added first."""
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward, "softmax")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Divide each last-axis row by its L2 norm; all-zero rows stay zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.where(n > 0, n, 1.0)
    y = x.data / n

    def backward(g):
        _accum(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / n)

    return _make(y, (x,), backward, "l2_normalize_rows")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(row)[target]``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if targets.shape != (n,) or np.any(targets < 0) or np.any(targets >= logits.shape[1]):
        raise IndexError("cross_entropy_rows: target out of range")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        _accum(logits, g * p / n)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy_rows")


def softmax_xent(logits: Tensor, target: int) -> Tensor:
    """Cross entropy of a single logit vector against class ``target``."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError("softmax_xent expects a 1-D logit vector")
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    return cross_entropy_rows(reshape(logits, (1, -1)), [target])


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)
    worst: tuple[int, int] | None = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    coords: dict[int, Sequence[int]] | None = None,
) -> GradCheckResult:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads ``params`` by closure; parameters are
    perturbed in place and restored. Relative error uses the denominator
    ``max(|a|, |b|, 1e-8)``. A coordinate whose error exceeds ``tol`` and
    whose one-sided slopes disagree (a kink lies inside ``[x-h, x+h]``) is
    reported in ``excluded`` rather than counted. ``coords`` optionally
    restricts checking to given flat indices per parameter position.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    for p in params:
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = f()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite")
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        v = float(f().data)
        if not math.isfinite(v):
            raise FloatingPointError("grad_check: f is not finite")
        return v

    f0 = value()
    result = GradCheckResult(0.0, 0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        idxs = range(flat.size) if coords is None or pi not in coords else coords[pi]
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[i]
            err = abs(num - a) / max(abs(num), abs(a), 1e-8)
            if err > tol:
                s_plus, s_minus = (fp - f0) / h, (f0 - fm) / h
                if abs(s_plus - s_minus) > 0.01 * max(abs(s_plus), abs(s_minus)):
                    result.excluded.append((pi, i))
                    continue
            result.n_checked += 1
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (pi, i)
    return result
