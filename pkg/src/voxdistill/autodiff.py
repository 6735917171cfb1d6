"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Every learnable component in this package is built from the operations in
this module.  Design points:

* float64 everywhere; gradient-check fidelity beats speed at this scale.
* The tape is rebuilt on every forward pass, so data-dependent structure
  (grouping, diffusion) needs no special casing.
* Values that fan out accumulate gradients by addition, which is what
  residual connections require.
* A tape and its tensors belong to one thread during forward/backward;
  tensors without a tape are immutable constants and safe to share.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    DimensionError,
    DomainError,
)

MAX_RANK = 4
MAX_ELEMENTS = 2**31

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Globally enable per-op output finiteness validation (slow, for tests)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Shape(tuple):
    """Tensor extents. Rank is capped at 4 and element counts at 2**31."""

    def __new__(cls, dims: Iterable[int]) -> "Shape":
        dims = tuple(int(d) for d in dims)
        if len(dims) > MAX_RANK:
            raise DimensionError(f"rank {len(dims)} exceeds maximum {MAX_RANK}: {dims}")
        size = 1
        for d in dims:
            if d < 0:
                raise DimensionError(f"negative extent in shape {dims}")
            size *= d
        if size >= MAX_ELEMENTS:
            raise DimensionError(f"element count {size} exceeds {MAX_ELEMENTS}")
        return super().__new__(cls, dims)

    @property
    def rank(self) -> int:
        return len(self)

    @property
    def size(self) -> int:
        return int(np.prod(self, dtype=np.int64)) if self else 1


class Tensor:
    """A float64 array, optionally recorded on a tape for gradients."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        Shape(arr.shape)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Shape:
        return Shape(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this value; gradients stop here."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={tuple(self.data.shape)}{tag})"

    # Arithmetic sugar; all defined in terms of the module-level ops.
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("parents", "vjp", "nbytes")

    def __init__(self, parents, vjp, nbytes):
        self.parents = parents
        self.vjp = vjp
        self.nbytes = nbytes


class Tape:
    """Ordered record of operations; creation order is the topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_shapes: dict[int, tuple[int, ...]] = {}
        self.bytes_recorded = 0

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, data) -> Tensor:
        """Register a new leaf (trainable input) on this tape."""
        t = Tensor(data)
        if not np.all(np.isfinite(t.data)):
            raise ContractError("leaf contains non-finite entries")
        nid = self._record((), None, t.data.nbytes)
        self._leaf_shapes[nid] = t.data.shape
        t.tape = self
        t.node = nid
        return t

    def _record(self, parents: tuple[int, ...], vjp, nbytes: int) -> int:
        self._nodes.append(_Node(parents, vjp, nbytes))
        self.bytes_recorded += nbytes
        return len(self._nodes) - 1


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep; returns gradients for every leaf, zeros if unreached."""
    if loss.tape is not tape or loss.node is None:
        raise ContractError("loss is not recorded on this tape")
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
    leaf_grads: dict[int, np.ndarray] = {}
    for nid in range(len(tape._nodes) - 1, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        if nid in tape._leaf_shapes:
            leaf_grads[nid] = g
            continue
        node = tape._nodes[nid]
        if node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid < 0 or pg is None:
                continue
            acc = grads.get(pid)
            grads[pid] = pg if acc is None else acc + pg
    out = {}
    for nid, shape in tape._leaf_shapes.items():
        g = leaf_grads.get(nid)
        if g is None:
            g = np.zeros(shape)
        elif g.shape != shape:
            g = np.broadcast_to(g, shape).copy()
        out[nid] = Tensor(g)
    return out


# ---------------------------------------------------------------------------
# MAC counting (used by the analytic cost model cross-checks)
# ---------------------------------------------------------------------------

class MacCounter:
    """Collects multiply-accumulate counts per named scope."""

    def __init__(self):
        self.by_label: dict[str, int] = {}
        self._label: str | None = None

    def add(self, macs: int) -> None:
        if self._label is not None:
            self.by_label[self._label] = self.by_label.get(self._label, 0) + int(macs)

    def total(self) -> int:
        return sum(self.by_label.values())


_ACTIVE_COUNTER: MacCounter | None = None


class count_macs:
    """Context manager activating a MacCounter for the enclosed ops."""

    def __init__(self, counter: MacCounter):
        self.counter = counter

    def __enter__(self):
        global _ACTIVE_COUNTER
        self._prev = _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self.counter
        return self.counter

    def __exit__(self, *exc):
        global _ACTIVE_COUNTER
        _ACTIVE_COUNTER = self._prev
        return False


class mac_scope:
    """Labels MACs recorded inside the block; no-op without an active counter."""

    def __init__(self, label: str):
        self.label = label

    def __enter__(self):
        if _ACTIVE_COUNTER is not None:
            self._prev = _ACTIVE_COUNTER._label
            _ACTIVE_COUNTER._label = self.label
        return self

    def __exit__(self, *exc):
        if _ACTIVE_COUNTER is not None:
            _ACTIVE_COUNTER._label = self._prev
        return False


def _count(macs: int) -> None:
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.add(macs)


# ---------------------------------------------------------------------------
# Op plumbing
# ---------------------------------------------------------------------------

TensorLike = "Tensor | np.ndarray | float | int"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(parents: Sequence[Tensor]) -> Tape | None:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif tape is not p.tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _make(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise ContractError("op produced non-finite output")
    Shape(out_data.shape)
    tape = _find_tape(parents)
    if tape is None:
        return Tensor(out_data)
    pids = tuple(p.node if (p.tape is tape and p.node is not None) else -1 for p in parents)
    nid = tape._record(pids, vjp, out_data.nbytes)
    return Tensor(out_data, tape, nid)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive input")
    out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0, s, 1.0 - s)
        return (g * s,)

    return _make(out, (a,), vjp)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    s = np.where(a.data >= 0, s, 1.0 - s)
    out = a.data * s

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), vjp)


def power(a, exponent: float) -> Tensor:
    """a ** exponent for a >= 0; exponent is a plain float."""
    a = as_tensor(a)
    exponent = float(exponent)
    if exponent == 0.0:
        return _make(np.ones_like(a.data), (a,), lambda g: (np.zeros_like(g),))
    if exponent != int(exponent) and np.any(a.data < 0.0):
        raise DomainError("fractional power requires non-negative input")
    out = np.power(a.data, exponent)

    def vjp(g):
        if exponent >= 1.0:
            return (g * exponent * np.power(a.data, exponent - 1.0),)
        safe = np.where(a.data == 0.0, 1.0, a.data)
        d = exponent * np.power(safe, exponent - 1.0)
        return (g * np.where(a.data == 0.0, 0.0, d),)

    return _make(out, (a,), vjp)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)
    return _make(out, (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


def expm1_over(a) -> Tensor:
    """phi(z) = (exp(z) - 1) / z with phi(0) = 1; smooth gradient at 0."""
    a = as_tensor(a)
    z = a.data
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    out = np.where(small, 1.0, np.expm1(safe) / safe)

    def vjp(g):
        near = np.abs(z) < 1e-4
        zs = np.where(near, 1.0, z)
        d_exact = (np.exp(zs) * (zs - 1.0) + 1.0) / (zs * zs)
        d_series = 0.5 + z / 3.0 + z * z / 8.0
        return (g * np.where(near, d_series, d_exact),)

    return _make(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs rank >= 2 operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _count(batch * out.shape[-2] * a.data.shape[-1] * out.shape[-1])

    def vjp(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """x @ w + b: the linear layer used for every learned projection."""
    return add(matmul(x, w), b)


def layer_norm(x, scale, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last dimension, then apply the learned affine."""
    x, scale, bias = as_tensor(x), as_tensor(scale), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * scale.data + bias.data

    def vjp(g):
        dxhat = g * scale.data
        dvar = np.sum(dxhat * xc * (-0.5) * inv**3, axis=-1, keepdims=True)
        dmu = (np.sum(-dxhat * inv, axis=-1, keepdims=True)
               + dvar * np.sum(-2.0 * xc, axis=-1, keepdims=True) / d)
        dx = dxhat * inv + dvar * 2.0 * xc / d + dmu / d
        dscale = _unbroadcast(g * xhat, scale.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        return dx, dscale, dbias

    return _make(out, (x, scale, bias), vjp)


def softmax_lastdim(x, mask: np.ndarray | None = None) -> Tensor:
    """Row-stabilized softmax over the last dim; masked entries are exactly 0.

    `mask` is a boolean array broadcastable to x, True marking real entries.
    Every row must keep at least one True entry.
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateRowError("softmax row with every entry masked")
        z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, x.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(np.asarray(out), (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, x.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes], dtype=np.int64))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy() / count,)

    return _make(np.asarray(out), (x,), vjp)


def l2norm_lastdim(x, eps: float = 1e-12) -> Tensor:
    """Euclidean norm over the last axis; gradient is 0 at the exact zero vector."""
    x = as_tensor(x)
    sq = np.sum(x.data * x.data, axis=-1)
    out = np.sqrt(sq)

    def vjp(g):
        denom = np.maximum(out, eps)
        return (g[..., None] * x.data / denom[..., None],)

    return _make(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(out, (x,), vjp)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(parts), vjp)


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------

def gather_rows(x, index: np.ndarray) -> Tensor:
    """out[..., :] = x[index[...], :]; index is any-shape integer array."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.data.shape[0]):
        raise ContractError("gather index out of range")
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(out, (x,), vjp)


def scatter_add_rows(values, index: np.ndarray, num_rows: int) -> Tensor:
    """out[index[...]] += values[...]; index shape must prefix values' shape."""
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if values.data.shape[: index.ndim] != index.shape:
        raise ContractError(
            f"scatter index shape {index.shape} does not prefix values {values.data.shape}")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise ContractError("scatter index out of range")
    tail = values.data.shape[index.ndim:]
    out = np.zeros((num_rows, *tail))
    np.add.at(out, index, values.data)

    def vjp(g):
        return (g[index],)

    return _make(out, (values,), vjp)


# ---------------------------------------------------------------------------
# Sequence ops
# ---------------------------------------------------------------------------

def causal_conv1d(x, weight, bias) -> Tensor:
    """Depthwise causal convolution along axis 1 of x: [G, L, C], weight [C, K].

    Output position t sees inputs t-K+1 .. t (zero padded on the left), so
    the op is strictly causal.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    G, L, C = x.data.shape
    K = weight.data.shape[1]
    xp = np.zeros((G, L + K - 1, C))
    xp[:, K - 1:, :] = x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)  # [G, L, C, K]
    out = np.einsum("glck,ck->glc", windows, weight.data) + bias.data
    _count(G * L * C * K)

    def vjp(g):
        dw = np.einsum("glck,glc->ck", windows, g)
        db = g.sum(axis=(0, 1))
        dxp = np.zeros_like(xp)
        for j in range(K):
            dxp[:, j:j + L, :] += g * weight.data[:, j]
        return dxp[:, K - 1:, :], dw, db

    return _make(out, (x, weight, bias), vjp)


def selective_scan(x, a_bar, b_bar, c) -> Tensor:
    """Input-dependent linear recurrence over axis 1.

    x      [G, L, C]        per-step inputs
    a_bar  [G, L, C, S]     discretized decay per channel/state
    b_bar  [G, L, C, S]     discretized input map
    c      [G, L, S]        per-step output map, shared across channels

    h_0 = 0;  h_t = a_bar_t * h_{t-1} + b_bar_t * x_t;  y_t[c] = sum_s c_t[s] h_t[c,s].
    Strictly causal by construction.
    """
    x, a_bar, b_bar, c = as_tensor(x), as_tensor(a_bar), as_tensor(b_bar), as_tensor(c)
    G, L, C = x.data.shape
    S = c.data.shape[-1]
    if a_bar.data.shape != (G, L, C, S) or b_bar.data.shape != (G, L, C, S):
        raise DimensionError(
            f"scan parameter shapes {a_bar.data.shape}/{b_bar.data.shape} "
            f"do not match ({G},{L},{C},{S})")
    if c.data.shape != (G, L, S):
        raise DimensionError(f"scan output map shape {c.data.shape} != ({G},{L},{S})")

    hs = np.empty((G, L, C, S))
    h = np.zeros((G, C, S))
    for t in range(L):
        h = a_bar.data[:, t] * h + b_bar.data[:, t] * x.data[:, t, :, None]
        hs[:, t] = h
    y = np.einsum("glcs,gls->glc", hs, c.data)
    _count(3 * G * L * C * S)

    def vjp(g):
        dx = np.empty_like(x.data)
        da = np.empty_like(a_bar.data)
        db = np.empty_like(b_bar.data)
        dc = np.einsum("glcs,glc->gls", hs, g)
        dh = np.zeros((G, C, S))
        for t in range(L - 1, -1, -1):
            dh = dh + g[:, t, :, None] * c.data[:, t, None, :]
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((G, C, S))
            da[:, t] = dh * h_prev
            db[:, t] = dh * x.data[:, t, :, None]
            dx[:, t] = np.sum(dh * b_bar.data[:, t], axis=-1)
            dh = dh * a_bar.data[:, t]
        return dx, da, db, dc

    return _make(y, (x, a_bar, b_bar, c), vjp)
