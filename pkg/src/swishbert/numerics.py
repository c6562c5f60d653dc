"""Dense tensor math with a reverse-mode gradient tape.

Only the op set needed by the encoder blocks is provided. Every op takes and
returns :class:`Tensor` objects; when a :class:`GradTape` is active and any
input requires a gradient, the op appends a backward closure to the tape.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with GradTape():
    ...     loss = total(matmul(Tensor(np.eye(2)), w))
    ...     backward(loss)
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, GradientError

__all__ = [
    "DimensionError",
    "GradientError",
    "Tensor",
    "GradTape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "gelu",
    "erf_gate",
    "elementwise",
    "softmax_rows",
    "layer_norm",
    "take_rows",
    "add_const",
    "dropout",
    "reshape",
    "split_heads",
    "merge_heads",
    "add_head_bias",
    "total",
    "finite_diff_grad",
    "max_rel_error",
]

LN_EPS = 1e-12
_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A rank <= 3 real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[GradTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Ordered record of executed ops, replayed in reverse by :func:`backward`.

    Used as a context manager. Tapes nest; the innermost one records.
    """

    _stack: list["GradTape"] = []

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        GradTape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        GradTape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def active(cls) -> Optional["GradTape"]:
        return cls._stack[-1] if cls._stack else None

    def clear(self) -> None:
        for out, _, _ in self.entries:
            out._tape = None
        self.entries.clear()


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = GradTape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.entries.append((out, tuple(inputs), grad_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into leaves (call ``zero_grad`` between steps).
    Intermediate gradients are dropped as soon as they have been propagated.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise GradientError("loss was not produced under an active GradTape")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, grad_fn in reversed(tape.entries):
        g = out.grad
        if g is None:
            continue
        in_grads = grad_fn(g)
        out.grad = None
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            # Out of place: grad arrays may be shared between inputs.
            if t.grad is None:
                t.grad = np.asarray(gi, dtype=t.dtype)
            else:
                t.grad = t.grad + gi
    tape.clear()


# ----------------------------------------------------------------------------
# shape helpers


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    """'same' for equal shapes, 'row' if b is a bias row matching a's last axis."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row"
    raise DimensionError(f"{op}: cannot broadcast {b.shape} onto {a.shape}")


def _sum_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Matrix product.

    Supported layouts: ``[m,k]@[k,n]``, ``[B,m,k]@[k,n]`` (shared weight) and
    ``[B,m,k]@[B,k,n]`` (batched). With ``transpose_b`` the last two axes of
    ``b`` are swapped first.
    """
    bd = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a.ndim not in (2, 3) or bd.ndim not in (2, 3) or (a.ndim == 2 and bd.ndim == 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != bd.shape[-2] or (bd.ndim == 3 and a.shape[0] != bd.shape[0]):
        raise DimensionError(
            f"matmul: shapes {a.shape} and {b.shape}{' (transposed)' if transpose_b else ''} do not align"
        )
    out = a.data @ bd

    def grad_fn(g):
        # Zero-stride views would push numpy off the BLAS path.
        g = np.ascontiguousarray(g)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and a.ndim == 3:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        if transpose_b:
            gb = np.swapaxes(gb, -1, -2)
        return ga, gb

    return _record(out, (a, b), grad_fn)


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")

    def grad_fn(g):
        return g, (g if kind == "same" else _sum_to_row(g))

    return _record(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "sub")

    def grad_fn(g):
        return g, (-g if kind == "same" else -_sum_to_row(g))

    return _record(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")

    def grad_fn(g):
        gb = g * a.data
        return g * b.data, (gb if kind == "same" else _sum_to_row(gb))

    return _record(a.data * b.data, (a, b), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant (not differentiated)."""
    return _record(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |z| and vectorised by numpy.
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    y = (x.data * cdf).astype(x.dtype, copy=False)

    def grad_fn(g):
        return (g * (cdf + x.data * _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)),)

    return _record(y, (x,), grad_fn)


def erf_gate(x: Tensor) -> Tensor:
    """Gaussian CDF ``Phi(x) = (1 + erf(x/sqrt 2)) / 2``; GeLU is ``x * erf_gate(x)``."""
    y = (0.5 * (1.0 + erf(x.data * _SQRT_HALF))).astype(x.dtype, copy=False)
    return _record(y, (x,), lambda g: (g * _INV_SQRT_2PI * np.exp(-0.5 * x.data**2),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "tanh_erf_helper": erf_gate,
}


def elementwise(op: str, *inputs: Tensor) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, gelu, tanh_erf_helper."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ----------------------------------------------------------------------------
# reductions and normalisation


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs at least 2 features per row, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gxhat = g * gain.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _sum_to_row(g * xhat), _sum_to_row(g)

    return _record(out.astype(x.dtype, copy=False), (x, gain, bias), grad_fn)


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    return _record(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


# ----------------------------------------------------------------------------
# indexing and layout


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table: ``out[...] = table[ids[...]]``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    out = table.data[ids]
    if out.ndim > 3:
        raise DimensionError(f"take_rows: result rank {out.ndim} exceeds 3")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(out, (table,), grad_fn)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant array (broadcast by numpy rules); gradient flows to ``x`` only."""
    out = x.data + c
    if out.shape != x.shape:
        raise DimensionError(f"add_const: constant {np.shape(c)} would reshape {x.shape}")
    return _record(out.astype(x.dtype, copy=False), (x,), lambda g: (g,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not train or rate <= 0.0:
        return x
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep *= x.dtype.type(1.0 / (1.0 - rate))
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """``[B, l, h*dh] -> [B*h, l, dh]``."""
    B, l, d = x.shape
    if d % heads:
        raise DimensionError(f"split_heads: {d} features not divisible by {heads} heads")
    dh = d // heads
    out = x.data.reshape(B, l, heads, dh).transpose(0, 2, 1, 3).reshape(B * heads, l, dh)

    def grad_fn(g):
        return (g.reshape(B, heads, l, dh).transpose(0, 2, 1, 3).reshape(B, l, d),)

    return _record(np.ascontiguousarray(out), (x,), grad_fn)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    """``[B*h, l, dh] -> [B, l, h*dh]``; inverse of :func:`split_heads`."""
    Bh, l, dh = x.shape
    if Bh % heads:
        raise DimensionError(f"merge_heads: leading axis {Bh} not divisible by {heads}")
    B = Bh // heads
    out = x.data.reshape(B, heads, l, dh).transpose(0, 2, 1, 3).reshape(B, l, heads * dh)

    def grad_fn(g):
        return (g.reshape(B, l, heads, dh).transpose(0, 2, 1, 3).reshape(Bh, l, dh),)

    return _record(np.ascontiguousarray(out), (x,), grad_fn)


def add_head_bias(scores: Tensor, bias: Tensor) -> Tensor:
    """Add per-head position logits ``bias[l, l, h]`` to ``scores[B*h, l, l]``."""
    lq, lk, h = bias.shape
    Bh = scores.shape[0]
    if scores.shape[1:] != (lq, lk) or Bh % h:
        raise DimensionError(f"add_head_bias: scores {scores.shape} vs bias {bias.shape}")
    B = Bh // h
    per_head = bias.data.transpose(2, 0, 1)
    out = (scores.data.reshape(B, h, lq, lk) + per_head).reshape(Bh, lq, lk)

    def grad_fn(g):
        return g, g.reshape(B, h, lq, lk).sum(axis=0).transpose(1, 2, 0)

    return _record(out, (scores, bias), grad_fn)


# ----------------------------------------------------------------------------
# verification


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    ``x.data`` is perturbed in place one coordinate at a time and restored,
    so ``f`` may read ``x`` through a closure (e.g. a model parameter).
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(x))
        flat[i] = orig - eps
        fm = _scalar(f(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(()))


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a-n| / max(|a|,|n|)`` over coordinates where either exceeds ``floor``.

    Coordinates below the floor on both sides are compared absolutely and
    count as failures only if they differ by more than ``floor``.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    mag = np.maximum(np.abs(a), np.abs(n))
    big = mag > floor
    err = 0.0
    if big.any():
        err = float(np.max(np.abs(a[big] - n[big]) / mag[big]))
    if (~big).any() and np.max(np.abs(a[~big] - n[~big])) > floor:
        err = max(err, 1.0)
    return err
