"""Reverse-mode automatic differentiation on numpy arrays.

The design is a classic explicit tape: forward ops compute with numpy and,
when a Tape is active, append an OpRecord (op name, input/output node ids,
saved activations). backward() replays the records in reverse, accumulating
vector-Jacobian products into leaf gradients.

Only the operations the model actually needs are implemented. Everything
runs in a single dtype per graph (float32 by default; float64 is used for
gradient verification), and mixing dtypes raises instead of silently
upcasting.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, ContractError, DimensionError, IndexRangeError

DEFAULT_DTYPE = np.float32

_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    """A numpy array plus gradient bookkeeping.

    `grad` is populated (for leaves with requires_grad=True) by backward();
    optimizers read and reset it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Thin operator sugar over the functional ops.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class OpRecord:
    """One taped operation: enough to audit order and to run its VJP."""

    op: str
    input_ids: tuple
    output_id: int
    inputs: tuple
    output: Tensor
    ctx: tuple


class Tape:
    """Records ops while active (as a context manager) for one backward pass."""

    def __init__(self):
        self.entries: list[OpRecord] = []
        self.consumed = False
        self._ids: dict[int, int] = {}
        self._next_id = 0
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        if getattr(_TLS, "tape", None) is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    def _node_id(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = self._next_id
            self._next_id += 1
            self._ids[id(t)] = nid
        return nid

    def record(self, op: str, inputs: tuple, output: Tensor, ctx: tuple) -> None:
        input_ids = tuple(self._node_id(t) for t in inputs)
        output_id = self._node_id(output)
        self.entries.append(OpRecord(op, input_ids, output_id, inputs, output, ctx))
        self._produced.add(id(output))


# Thread-local so concurrent trainers (hyperparameter search workers) each
# record onto their own tape.
_TLS = threading.local()

# op name -> fn(record, grad_out) -> per-input gradients (None = no gradient)
_BACKWARD: dict[str, Callable] = {}


def _vjp(name: str):
    def deco(fn):
        _BACKWARD[name] = fn
        return fn

    return deco


def _emit(op: str, inputs: tuple, out_data: np.ndarray, ctx: tuple = ()) -> Tensor:
    tape = getattr(_TLS, "tape", None)
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape.record(op, inputs, out, ctx)
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ContractError(
            f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}; one graph, one dtype"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = g.reshape(shape)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    a_t, b_t = a, _as_tensor(b, a)
    _check_same_dtype(a_t, b_t, "add")
    try:
        np.broadcast_shapes(a_t.data.shape, b_t.data.shape)
    except ValueError:
        raise DimensionError(
            f"add: cannot broadcast {a_t.data.shape} with {b_t.data.shape}"
        ) from None
    return _emit("add", (a_t, b_t), a_t.data + b_t.data)


@_vjp("add")
def _add_bwd(rec: OpRecord, g: np.ndarray):
    a, b = rec.inputs
    return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)


def sub(a: Tensor, b) -> Tensor:
    return add(a, scale(_as_tensor(b, a), -1.0))


def mul(a: Tensor, b) -> Tensor:
    a_t, b_t = a, _as_tensor(b, a)
    _check_same_dtype(a_t, b_t, "mul")
    try:
        np.broadcast_shapes(a_t.data.shape, b_t.data.shape)
    except ValueError:
        raise DimensionError(
            f"mul: cannot broadcast {a_t.data.shape} with {b_t.data.shape}"
        ) from None
    return _emit("mul", (a_t, b_t), a_t.data * b_t.data, (a_t.data, b_t.data))


@_vjp("mul")
def _mul_bwd(rec: OpRecord, g: np.ndarray):
    a_data, b_data = rec.ctx
    a, b = rec.inputs
    ga = _unbroadcast(g * b_data, a.data.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a_data, b.data.shape) if b.requires_grad else None
    return ga, gb


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", (a,), a.data * np.asarray(s, dtype=a.dtype), (s,))


@_vjp("scale")
def _scale_bwd(rec: OpRecord, g: np.ndarray):
    (s,) = rec.ctx
    return (g * np.asarray(s, dtype=g.dtype),)


def gelu(x: Tensor) -> Tensor:
    # Exact form x * Phi(x) with the Gaussian CDF, not the tanh approximation.
    return _emit("gelu", (x,), x.data * ndtr(x.data), (x.data,))


@_vjp("gelu")
def _gelu_bwd(rec: OpRecord, g: np.ndarray):
    (x,) = rec.ctx
    pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=x.dtype)
    return (g * (ndtr(x) + x * pdf),)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul: operands must be at least 2-d, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {a.data.shape} x {b.data.shape}"
        )
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise DimensionError(
            f"matmul: batch dimensions incompatible, {a.data.shape} x {b.data.shape}"
        ) from None
    _check_same_dtype(a, b, "matmul")
    return _emit("matmul", (a, b), np.matmul(a.data, b.data), (a.data, b.data))


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


@_vjp("matmul")
def _matmul_bwd(rec: OpRecord, g: np.ndarray):
    a_data, b_data = rec.ctx
    a, b = rec.inputs
    ga = gb = None
    if a.requires_grad:
        ga = _unbroadcast(np.matmul(g, _swap_last(b_data)), a_data.shape)
    if b.requires_grad:
        gb = _unbroadcast(np.matmul(_swap_last(a_data), g), b_data.shape)
    return ga, gb


# ---------------------------------------------------------------------------
# normalizers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # max-subtraction may hit -inf for astronomically spread inputs; exp
    # turns that into an exact 0, which is the right answer
    with np.errstate(over="ignore"):
        z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), s, (s, axis))


@_vjp("softmax")
def _softmax_bwd(rec: OpRecord, g: np.ndarray):
    s, axis = rec.ctx
    inner = (g * s).sum(axis=axis, keepdims=True)
    return ((g - inner) * s,)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _emit("log_softmax", (x,), out, (np.exp(out), axis))


@_vjp("log_softmax")
def _log_softmax_bwd(rec: OpRecord, g: np.ndarray):
    s, axis = rec.ctx
    return (g - s * g.sum(axis=axis, keepdims=True),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.data.shape[-1] < 1:
        raise DimensionError(f"layer_norm: empty last axis in {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = xc * inv
    out = y * gain.data + bias.data
    return _emit("layer_norm", (x, gain, bias), out, (y, inv, gain.data))


@_vjp("layer_norm")
def _layer_norm_bwd(rec: OpRecord, g: np.ndarray):
    y, inv, gain = rec.ctx
    x, gain_t, bias_t = rec.inputs
    dy = g * gain
    # d/dx of (x - mu)/sqrt(var + eps), means taken over the last axis
    gx = inv * (
        dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True)
    )
    ggain = (g * y).reshape(-1, y.shape[-1]).sum(axis=0) if gain_t.requires_grad else None
    gbias = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias_t.requires_grad else None
    return gx, ggain, gbias


# ---------------------------------------------------------------------------
# regularizers


def dropout(x: Tensor, p: float, rng: np.random.Generator, active: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must satisfy 0 <= p < 1, got {p=}")
    if not active or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype)
    keep /= np.asarray(1.0 - p, dtype=x.dtype)
    return _emit("dropout", (x,), x.data * keep, (keep,))


@_vjp("dropout")
def _dropout_bwd(rec: OpRecord, g: np.ndarray):
    (keep,) = rec.ctx
    return (g * keep,)


# ---------------------------------------------------------------------------
# reductions and pooling


def maxpool(x: Tensor, axis: int) -> Tensor:
    if x.data.shape[axis] < 1:
        raise DimensionError(f"maxpool: empty axis {axis} in shape {x.data.shape}")
    idx = np.argmax(x.data, axis=axis)  # first index on ties
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    return _emit("maxpool", (x,), out, (idx, axis))


@_vjp("maxpool")
def _maxpool_bwd(rec: OpRecord, g: np.ndarray):
    idx, axis = rec.ctx
    (x,) = rec.inputs
    gx = np.zeros_like(x.data)
    np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
    return (gx,)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum_all", (x,), np.asarray(x.data.sum(), dtype=x.dtype), (x.data.shape,))


@_vjp("sum_all")
def _sum_all_bwd(rec: OpRecord, g: np.ndarray):
    (shape,) = rec.ctx
    return (np.full(shape, g, dtype=g.dtype),)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# lookups


def gather(table: Tensor, idx: np.ndarray, label: str = "table") -> Tensor:
    idx = np.asarray(idx)
    if table.data.ndim != 2:
        raise DimensionError(f"gather: table must be 2-d, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        bad = idx[(idx < 0) | (idx >= table.data.shape[0])][0]
        raise IndexRangeError(
            f"gather into {label}: id {int(bad)} outside [0, {table.data.shape[0]})"
        )
    return _emit("gather", (table,), table.data[idx], (idx, table.data.shape))


@_vjp("gather")
def _gather_bwd(rec: OpRecord, g: np.ndarray):
    idx, shape = rec.ctx
    gt = np.zeros(shape, dtype=g.dtype)
    np.add.at(gt, idx, g)
    return (gt,)


def interp_rows(
    table: Tensor,
    idx_lo: np.ndarray,
    idx_hi: np.ndarray,
    w_lo: np.ndarray,
    w_hi: np.ndarray,
) -> Tensor:
    """Weighted blend of two table rows per output row.

    Gradient flows only into the rows actually referenced, scaled by their
    weights. Weights are constants (no gradient), cast to the table dtype.
    """
    t = table.data
    if t.ndim != 2:
        raise DimensionError(f"interp_rows: table must be 2-d, got {t.shape}")
    n = t.shape[0]
    for nm, idx in (("idx_lo", idx_lo), ("idx_hi", idx_hi)):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexRangeError(f"interp_rows: {nm} outside [0, {n})")
    wl = np.asarray(w_lo, dtype=t.dtype)
    wh = np.asarray(w_hi, dtype=t.dtype)
    out = wl[:, None] * t[idx_lo] + wh[:, None] * t[idx_hi]
    return _emit("interp_rows", (table,), out, (idx_lo, idx_hi, wl, wh, t.shape))


@_vjp("interp_rows")
def _interp_rows_bwd(rec: OpRecord, g: np.ndarray):
    idx_lo, idx_hi, wl, wh, shape = rec.ctx
    gt = np.zeros(shape, dtype=g.dtype)
    np.add.at(gt, idx_lo, wl[:, None] * g)
    np.add.at(gt, idx_hi, wh[:, None] * g)
    return (gt,)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", (x,), x.data.reshape(shape), (x.data.shape,))


@_vjp("reshape")
def _reshape_bwd(rec: OpRecord, g: np.ndarray):
    (shape,) = rec.ctx
    return (g.reshape(shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return _emit("transpose", (x,), x.data.transpose(axes), (tuple(axes),))


@_vjp("transpose")
def _transpose_bwd(rec: OpRecord, g: np.ndarray):
    (axes,) = rec.ctx
    return (g.transpose(np.argsort(axes)),)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise DimensionError("concat: no tensors given")
    first = parts[0]
    for p in parts[1:]:
        _check_same_dtype(first, p, "concat")
    sizes = tuple(p.data.shape[axis] for p in parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _emit("concat", tuple(parts), out, (sizes, axis))


@_vjp("concat")
def _concat_bwd(rec: OpRecord, g: np.ndarray):
    sizes, axis = rec.ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Prepend a batch axis of length n (view; grad sums over it)."""
    out = np.broadcast_to(x.data, (n,) + x.data.shape)
    return _emit("broadcast_rows", (x,), out, ())


@_vjp("broadcast_rows")
def _broadcast_rows_bwd(rec: OpRecord, g: np.ndarray):
    return (g.sum(axis=0),)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate leaf gradients for everything `loss` depends on.

    Gradients accumulate into Tensor.grad (+=), so callers reset grads
    between steps. A tape can be swept once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if tape.consumed:
        raise ContractError("backward: tape already swept; record a fresh tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.entries):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        parts = _BACKWARD[rec.op](rec, g)
        for t, gi in zip(rec.inputs, parts):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi

    produced = tape._produced
    done: set[int] = set()
    for rec in tape.entries:
        for t in rec.inputs:
            key = id(t)
            if key in done or key in produced or not t.requires_grad:
                continue
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g if t.grad is None else t.grad + g
            done.add(key)
