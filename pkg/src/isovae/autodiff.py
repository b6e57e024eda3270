"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations performed inside an active :class:`Tape` are recorded whenever one
of their inputs requires a gradient. ``tape.backward(loss)`` then walks the
records in reverse and accumulates ``d loss / d leaf`` into ``leaf.grad``.

Shape coercion is explicit: the only implicit broadcast is adding a bias
vector along the last axis (:func:`add_bias`).
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "TapeError",
    "tensor", "constant", "backward",
    "matmul", "add", "add_bias", "mul", "neg", "tanh", "sigmoid", "relu",
    "exp", "log", "softplus", "abs_", "sum_", "mean", "concat", "slice_",
    "reshape", "embedding", "softmax_cross_entropy", "logsumexp", "lstm_cell",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None

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

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; Python scalars are constants, never broadcast tensors
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return _add_scalar(self, -float(other))

    def __rsub__(self, other):
        return _add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use mul and exp/log")
        return _scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64).copy(), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64))


class Tape:
    """Dynamic record of operations; rebuilt for every training step."""

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, rule) -> Tensor:
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append((inputs, out, rule))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf reachable on ``tape``."""
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    produced = {id(rec[1]) for rec in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for inputs, out, rule in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = rule(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                t.grad += gi


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` a vector broadcast along the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _record((x, b), x.data + b.data, lambda g: (g, g.sum(axis=axes)))


def _add_scalar(x: Tensor, c: float) -> Tensor:
    return _record((x,), x.data + c, lambda g: (g,))


def _scale(x: Tensor, c: float) -> Tensor:
    return _record((x,), x.data * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record((a, b), ad * bd, lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return _record((x,), -x.data, lambda g: (-g,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record((x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record((x,), y, lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _record((x,), np.where(m, x.data, 0.0), lambda g: (g * m,))


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    y = np.exp(x.data)
    return _record((x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    _check_finite("log", x.data)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: non-positive input")
    xd = x.data
    return _record((x,), np.log(xd), lambda g: (g / xd,))


def softplus(x: Tensor) -> Tensor:
    """Stable ``log(1 + exp(x))``."""
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _record((x,), y, lambda g: (g * _sigmoid(xd),))


def abs_(x: Tensor) -> Tensor:
    """``|x|`` with subgradient 0 at the kink."""
    s = np.sign(x.data)
    return _record((x,), np.abs(x.data), lambda g: (g * s,))


# -- reductions and structure -------------------------------------------------

def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _record((x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _record((x,), x.data.sum(axis=ax), rule)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return _scale(sum_(x, axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record((a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ShapeError("concat: empty input list")
    nd = xs[0].ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != xs[0].shape[:ax] + xs[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shape mismatch {xs[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def rule(g):
        idx = [slice(None)] * nd
        out = []
        for i in range(len(xs)):
            idx[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _record(tuple(xs), np.concatenate([t.data for t in xs], axis=ax), rule)


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing: ints and slices only."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not isinstance(i, (int, slice, np.integer)):
            raise TypeError("slice: only int and slice indices are supported")
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record((x,), x.data[idx].copy(), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record((x,), y, lambda g: (g.reshape(old),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _record((table,), table.data[ids], rule)


def _logsumexp_rows(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    y = _logsumexp_rows(x.data, ax)
    xd = x.data

    def rule(g):
        p = np.exp(xd - np.expand_dims(y, ax))
        return (p * np.expand_dims(g, ax),)

    return _record((x,), y, rule)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``; returns shape ``(N,)``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("softmax_cross_entropy: target out of range")
    z = logits.data
    lse = _logsumexp_rows(z, 1)
    rows = np.arange(z.shape[0])
    loss = lse - z[rows, targets]

    def rule(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _record((logits,), loss, rule)


def lstm_cell(xproj: Tensor, h: Tensor, c: Tensor, w_hh: Tensor, mask=None) -> Tensor:
    """One LSTM step; returns ``[h_next, c_next]`` concatenated on the last axis.

    ``xproj`` is the precomputed input projection (bias included), shape
    ``(B, 4H)``, gate order (input, forget, cell, output). Rows whose ``mask``
    entry is 0 carry their previous state unchanged.
    """
    B, H = h.shape
    if xproj.shape != (B, 4 * H) or c.shape != (B, H) or w_hh.shape != (H, 4 * H):
        raise ShapeError(
            f"lstm_cell: shape mismatch xproj {xproj.shape}, h {h.shape}, c {c.shape}, w_hh {w_hh.shape}")
    hd, cd, wd = h.data, c.data, w_hh.data
    pre = xproj.data + hd @ wd
    i = _sigmoid(pre[:, :H])
    f = _sigmoid(pre[:, H:2 * H])
    gg = np.tanh(pre[:, 2 * H:3 * H])
    o = _sigmoid(pre[:, 3 * H:])
    c_new = f * cd + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(B, 1)
    if m is not None:
        h_out = m * h_new + (1.0 - m) * hd
        c_out = m * c_new + (1.0 - m) * cd
    else:
        h_out, c_out = h_new, c_new

    def rule(g):
        gh, gc = g[:, :H], g[:, H:]
        if m is not None:
            gh_new, gc_new = gh * m, gc * m
            gh_carry, gc_carry = gh * (1.0 - m), gc * (1.0 - m)
        else:
            gh_new, gc_new = gh, gc
            gh_carry = gc_carry = 0.0
        dc = gc_new + gh_new * o * (1.0 - tc * tc)
        d_o = gh_new * tc * o * (1.0 - o)
        d_i = dc * gg * i * (1.0 - i)
        d_f = dc * cd * f * (1.0 - f)
        d_g = dc * i * (1.0 - gg * gg)
        dpre = np.concatenate([d_i, d_f, d_g, d_o], axis=1)
        return (dpre, dpre @ wd.T + gh_carry, dc * f + gc_carry, hd.T @ dpre)

    return _record((xproj, h, c, w_hh), np.concatenate([h_out, c_out], axis=1), rule)
