"""Dense tensors with reverse-mode differentiation on top of numpy.

Every layer in the package is composed from the operations defined here.
A :class:`Tensor` records the operation that produced it so that
:meth:`Tensor.backward` can push gradients to the leaves.  The module also
carries the process-wide precision switch, a counter-based RNG, the
finite-difference gradient checker and an instrumented matmul counter used
to validate the analytic FLOPs model.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value appeared in a computation."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DegenerateError(ValueError):
    """A softmax row or a loss batch has nothing left to normalize over."""


class GradCheckError(RuntimeError):
    """Preconditions of :func:`grad_check` are violated."""


# ---------------------------------------------------------------- global state

_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True
_GRADCHECK_ACTIVE = False
_FLOP_COUNTER: "FlopCounter | None" = None
_FLOP_SCOPE = "other"


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit floats for tensors created from now on."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"unsupported precision: {bits}")


@contextlib.contextmanager
def precision(bits: int):
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


# ---------------------------------------------------------------- flop counting


class FlopCounter:
    """Accumulates 2*m*k*n for every matmul executed while installed."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def add(self, flops: int) -> None:
        self.by_scope[_FLOP_SCOPE] += flops


@contextlib.contextmanager
def count_flops():
    global _FLOP_COUNTER
    old = _FLOP_COUNTER
    counter = FlopCounter()
    _FLOP_COUNTER = counter
    try:
        yield counter
    finally:
        _FLOP_COUNTER = old


@contextlib.contextmanager
def flop_scope(name: str):
    """Label matmuls executed inside the block for :class:`FlopCounter`."""
    global _FLOP_SCOPE
    old = _FLOP_SCOPE
    _FLOP_SCOPE = name
    try:
        yield
    finally:
        _FLOP_SCOPE = old


# ---------------------------------------------------------------- tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward

    # --- conveniences
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DTYPE))


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=True)


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError("non-finite value produced")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def identity(x: Tensor) -> Tensor:
    return x


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; c[..., i, j] = sum_t a[..., i, t] b[..., t, j]."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    k = ad.shape[-1]
    flat_rhs = bd.ndim == 2 and ad.ndim > 2
    if flat_rhs:
        # one GEMM instead of a loop over leading axes
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd
    if _FLOP_COUNTER is not None:
        _FLOP_COUNTER.add(2 * out.size * k)
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = gb = None
        if flat_rhs:
            g2 = g.reshape(-1, g.shape[-1])
            if need_a:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if need_b:
                gb = ad.reshape(-1, k).T @ g2
            return ga, gb
        if need_a:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalizers


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (True = keep) zeroes entries exactly."""
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateError("softmax row is fully masked")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    H = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    y = xhat * gd + beta.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    if H < 1:
        raise ShapeError("layer_norm needs a non-empty last axis")
    return _result(y.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------- indexing


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _result(weight.data[ids], (weight,), bw)


def take_last(x: Tensor, index: np.ndarray, onehot: np.ndarray | None = None) -> Tensor:
    """Gather ``x[..., i, index[..., i, j]]`` into ``[..., i, j]``.

    ``index`` broadcasts against ``x`` on leading axes.  ``onehot`` (the
    one-hot expansion of ``index`` over the last axis of ``x``) speeds up
    the backward pass and is built on demand when missing.
    """
    xd = x.data
    R = xd.shape[-1]
    full = np.broadcast_to(index, xd.shape[:-1] + index.shape[-1:])
    y = np.take_along_axis(xd, full, axis=-1)

    def bw(g):
        oh = onehot
        if oh is None:
            oh = (index[..., None] == np.arange(R)).astype(g.dtype)
        # [..., i, 1, j] @ [..., i, j, R] -> [..., i, 1, R]
        out = (g[..., None, :] @ oh.astype(g.dtype, copy=False))[..., 0, :]
        return (_unbroadcast(out, xd.shape),)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------- stochastic


def dropout(x: Tensor, p: float, rng: "Rng | None", training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1): {p}")
    if not training or p == 0.0:
        return x
    if _GRADCHECK_ACTIVE:
        raise GradCheckError("dropout is active inside grad_check")
    keep = (rng.random32(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- loss


def cross_entropy_label_smoothed(logits: Tensor, targets: np.ndarray, pad_id: int,
                                 smoothing: float = 0.1) -> Tensor:
    """Mean over non-pad positions of KL(smoothed target || softmax(logits))."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must be in [0, 1): {smoothing}")
    targets = np.asarray(targets)
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tflat = targets.reshape(-1)
    keep = tflat != pad_id
    n = int(keep.sum())
    if n == 0:
        raise DegenerateError("batch contains only padding")
    if tflat.min() < 0 or tflat.max() >= V:
        raise ValueError("target id outside vocabulary")

    z = flat - flat.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    off = smoothing / V
    on = 1.0 - smoothing + off
    q = np.full_like(logp, off)
    q[np.arange(len(tflat)), tflat] = on
    neg_entropy = on * math.log(on) + ((V - 1) * off * math.log(off) if off > 0 else 0.0)
    per_pos = neg_entropy - (q * logp).sum(axis=-1)
    loss = np.asarray(per_pos[keep].sum() / n, dtype=logits.dtype)

    def bw(g):
        grad = (np.exp(logp) - q) * (keep[:, None] / n)
        return ((g * grad).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- rng

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Philox counter-based generator keyed by ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = seed & _MASK64
        self.stream = stream & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, i: int) -> "Rng":
        return Rng(self.seed, _splitmix64(self.stream ^ _splitmix64(i + 1)))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random32(self, shape) -> np.ndarray:
        return self._gen.random(shape, dtype=np.float32)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq):
        return seq[int(self._gen.integers(0, len(seq)))]

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# ---------------------------------------------------------------- parameters


class ParameterSet:
    """Named parameters laid out in one flat buffer (data and grad).

    Tensors are views into the buffer so an optimizer can update the whole
    model with a handful of vectorized numpy calls.
    """

    def __init__(self, arrays: dict[str, np.ndarray], dtype=None):
        dtype = dtype or _DTYPE
        self.names = list(arrays)
        sizes = [int(np.prod(a.shape)) for a in arrays.values()]
        total = int(sum(sizes))
        self.flat = np.zeros(total, dtype=dtype)
        self.flat_grad = np.zeros(total, dtype=dtype)
        self.tensors: dict[str, Tensor] = {}
        off = 0
        for (name, arr), n in zip(arrays.items(), sizes):
            view = self.flat[off:off + n].reshape(arr.shape)
            view[...] = arr
            t = Tensor(view)
            t.requires_grad = True
            t.grad = self.flat_grad[off:off + n].reshape(arr.shape)
            self.tensors[name] = t
            off += n

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self):
        return len(self.tensors)

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0

    def size(self) -> int:
        return self.flat.size


# ---------------------------------------------------------------- grad check


def grad_check(f: Callable[[], Tensor], leaves: Iterable[Tensor], h: float = 1e-5,
               samples_per_leaf: int | None = 4, rng: Rng | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``f`` re-runs the recorded computation from the current leaf values and
    returns a scalar.  Leaves must be 64-bit; any active dropout aborts the
    check.  With ``samples_per_leaf=None`` every coordinate is probed.
    """
    global _GRADCHECK_ACTIVE
    leaves = list(leaves)
    for leaf in leaves:
        if leaf.dtype != np.float64:
            raise GradCheckError("grad_check requires 64-bit leaves")
        if not leaf.requires_grad or leaf.grad is None:
            raise GradCheckError("grad_check leaves must require grad")
    rng = rng or Rng(0)
    _GRADCHECK_ACTIVE = True
    try:
        for leaf in leaves:
            leaf.zero_grad()
        loss = f()
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite loss in grad_check")
        loss.backward()
        analytic = [leaf.grad.copy() for leaf in leaves]
        worst = 0.0
        with no_grad():
            for leaf, ga in zip(leaves, analytic):
                flat = leaf.data.reshape(-1)
                if samples_per_leaf is None or samples_per_leaf >= flat.size:
                    coords = range(flat.size)
                else:
                    coords = rng.permutation(flat.size)[:samples_per_leaf]
                gflat = ga.reshape(-1)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + h
                    fp = f().item()
                    flat[c] = orig - h
                    fm = f().item()
                    flat[c] = orig
                    numeric = (fp - fm) / (2 * h)
                    if not math.isfinite(numeric):
                        raise NumericError("non-finite finite difference")
                    err = abs(gflat[c] - numeric) / max(1.0, abs(gflat[c]))
                    worst = max(worst, err)
        return worst
    finally:
        _GRADCHECK_ACTIVE = False
