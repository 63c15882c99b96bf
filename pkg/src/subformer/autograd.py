"""Dense tensor engine with reverse-mode differentiation.

Tensors hold numpy arrays of rank <= 3 (batch, sequence, feature).  Ops
record onto the active gradient tape in execution order; ``backward``
replays the tape in exact reverse, so accumulation order is deterministic.
The scalar width is configurable: 32-bit for training speed, 64-bit for
gradient verification.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_DEFAULT_DTYPE = np.float64
_STATE = threading.local()  # one active tape per thread (shard parallelism)


def _active_tape():
    return getattr(_STATE, "tape", None)


class TapeError(RuntimeError):
    """Backward misuse: stale tape, non-scalar root, no active tape."""


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def using_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def make_rng(seed: int, *streams: int) -> np.random.Generator:
    """Counter-based (Philox) generator for a (seed, stream...) address.

    Streams identify independent consumers (init, dropout per item, shuffle)
    so draws never depend on thread count or execution interleaving.
    """
    mix = np.uint64(0xCBF29CE484222325)
    for s in streams:
        mix = np.uint64((int(mix) ^ (int(s) & 0xFFFFFFFFFFFFFFFF)) * 0x100000001B3
                        % (1 << 64))
    key = [np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), mix]
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim > 3:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 3")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of differentiable ops; single-threaded."""

    def __init__(self):
        self._nodes = []  # (output tensor, backward closure)
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, *exc):
        _STATE.tape = None
        return False

    def __len__(self):
        return len(self._nodes)


def _record(out: Tensor, backward_fn):
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append((out, backward_fn))


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(root: Tensor, tape: Tape | None = None):
    """Populate gradients of every requires-grad tensor reachable from root.

    ``root`` must be a scalar (one element).  A tape can be consumed once;
    replaying without re-recording raises TapeError.
    """
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise TapeError("no active tape")
    if tape._consumed:
        raise TapeError("stale tape: backward was already called")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.data.shape}")
    tape._consumed = True
    root.grad = np.ones_like(root.data)
    for out, fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        fn(out.grad)


def _requires(*tensors):
    return any(t.requires_grad for t in tensors)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# --- arithmetic -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, requires_grad=_requires(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))
    _record(out, bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, requires_grad=_requires(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))
    _record(out, bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, requires_grad=_requires(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))
    _record(out, bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, g * c))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2D@2D, 3D@2D, and 3D@3D (batched) operands."""
    ra, rb = a.data.ndim, b.data.ndim
    if (ra, rb) not in ((2, 2), (3, 2), (3, 3)):
        raise ValueError(f"unsupported matmul ranks {ra}@{rb}")
    out = Tensor(a.data @ b.data, requires_grad=_requires(a, b))

    def bw(g):
        if (ra, rb) == (2, 2):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        elif (ra, rb) == (3, 2):
            _accum(a, g @ b.data.T)
            k = b.data.shape[1]
            _accum(b, a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, k))
        else:
            _accum(a, g @ b.data.swapaxes(-1, -2))
            _accum(b, a.data.swapaxes(-1, -2) @ g)
    _record(out, bw)
    return out


def transpose_last2(a: Tensor) -> Tensor:
    out = Tensor(a.data.swapaxes(-1, -2), requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, g.swapaxes(-1, -2)))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, g.reshape(a.data.shape)))
    return out


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (tuple of slices); backward scatters into zeros."""
    out = Tensor(a.data[key], requires_grad=a.requires_grad)

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)
    _record(out, bw)
    return out


# --- nonlinearities ---------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, g * (a.data > 0)))
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data),
                 requires_grad=a.requires_grad)
    _record(out, lambda g: _accum(a, g * np.where(a.data > 0, 1.0, slope)))
    return out


# --- shape / indexing -------------------------------------------------------

def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_requires(*tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)
    _record(out, bw)
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims),
                 requires_grad=a.requires_grad)

    def bw(g):
        if axis is None:
            _accum(a, np.full_like(a.data, np.asarray(g).item()))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())
    _record(out, bw)
    return out


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(table: Tensor, idx) -> Tensor:
    """Row lookup: out[..., :] = table[idx[...], :].  idx of -1 yields zeros.

    Serves both embedding lookup (learnable table) and feature gathering
    (differentiable table); gradients accumulate by destination row.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and idx.max(initial=-1) >= table.data.shape[0]:
        raise IndexError("gather index out of range")
    safe = np.where(idx < 0, 0, idx)
    data = table.data[safe]
    if idx.size:
        data = np.where((idx >= 0)[..., None], data, 0.0)
    out = Tensor(data, requires_grad=table.requires_grad)

    def bw(g):
        gt = np.zeros_like(table.data)
        valid = idx >= 0
        np.add.at(gt, idx[valid], g[valid])
        _accum(table, gt)
    _record(out, bw)
    return out


def scatter_sum(values: Tensor, index, out_size: int) -> Tensor:
    """Row r of the output is the sum of value rows with index r."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min(initial=0) < 0 or index.max(initial=0) >= out_size):
        raise IndexError("scatter index out of range")
    data = np.zeros((out_size,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(data, index, values.data)
    out = Tensor(data, requires_grad=values.requires_grad)
    _record(out, lambda g: _accum(values, g[index]))
    return out


# --- normalization / attention ----------------------------------------------

def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with optional boolean mask.

    Masked entries are exactly zero in the output and receive zero gradient.
    Raises ValueError if any row is fully masked.  Max-subtraction keeps the
    exponentials stable.
    """
    x = logits.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: fully-masked row")
    neg = np.where(m, x, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(neg - mx), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, requires_grad=logits.requires_grad)

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(logits, p * (g - inner))
    _record(out, bw)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_requires(x, gain, bias))
    d = x.data.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gx = g * gain.data
        term = gx - gx.mean(axis=-1, keepdims=True) \
            - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d
        _accum(x, term * inv)
    _record(out, bw)
    return out


def dropout(x: Tensor, p: float, mask) -> Tensor:
    """Apply a precomputed Bernoulli keep-mask, scaled by 1/(1-p).

    Callers draw ``mask`` from their own counter-based generator so masks
    are independent of sharding; at evaluation time simply skip the op.
    """
    if p <= 0.0:
        return x
    keep = np.asarray(mask, dtype=bool)
    factor = 1.0 / (1.0 - p)
    out = Tensor(np.where(keep, x.data * factor, 0.0), requires_grad=x.requires_grad)
    _record(out, lambda g: _accum(x, np.where(keep, g * factor, 0.0)))
    return out


# --- losses -----------------------------------------------------------------

def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over every entry; returns a shape-(1,) scalar."""
    t = np.asarray(target, dtype=pred.data.dtype)
    diff = pred.data - t
    out = Tensor(np.array([np.abs(diff).mean()]), requires_grad=pred.requires_grad)
    n = diff.size

    def bw(g):
        _accum(pred, (np.sign(diff) / n) * np.asarray(g).item())
    _record(out, bw)
    return out


def bce_with_logits_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Binary cross-entropy on logits, averaged over unmasked entries.

    ``mask`` marks present labels (True); missing labels contribute nothing.
    Uses the stable max(x,0) - x*t + log1p(exp(-|x|)) form.
    """
    x = pred.data
    t = np.asarray(target, dtype=x.dtype)
    m = np.ones_like(x, dtype=bool) if mask is None \
        else np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("bce_with_logits_loss: no labels present")
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.array([(per * m).sum() / count]), requires_grad=pred.requires_grad)

    def bw(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(pred, ((sig - t) * m / count) * np.asarray(g).item())
    _record(out, bw)
    return out
