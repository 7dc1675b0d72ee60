"""Dense tensors with reverse-mode autodiff on a dynamic tape.

numpy holds the array data; this module owns the tape. Each operation
records its parents and a backward rule on the output tensor, and
``Tensor.backward()`` walks the graph once in reverse topological order.

Precision is chosen globally (``set_default_dtype``): float64 is the
default because gradient checks need it; float32 can be selected for
training runs. Overflow-prone ops (exp, log, sqrt, div, pow) check their
outputs and raise ``NumericGuardError`` instead of propagating NaN/inf.
"""
from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

_DTYPE = np.float64
_GRAD_ENABLED = True

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class NumericGuardError(ArithmeticError):
    """A computation produced non-finite values."""


def set_default_dtype(dtype) -> None:
    """Set the global float precision ('float32'/'float64' or numpy dtype)."""
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype!r}")
    _DTYPE = dt.type


def get_default_dtype():
    return _DTYPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block (values are unaffected)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _guard(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericGuardError(f"non-finite values produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class RngStream:
    """Counter-based random stream (Philox) with an explicit draw counter.

    All stochastic operations in the package draw from an RngStream that is
    threaded through call signatures; there is no hidden global RNG state.
    ``child(*keys)`` derives an independent stream deterministically, so
    parallel or repeated consumers (MC samples, epochs, splits) never
    perturb each other's sequences.
    """

    def __init__(self, seed: int = 0, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.Philox(self._seq))
        self.draws = 0

    @staticmethod
    def _key(k) -> int:
        if isinstance(k, str):
            return zlib.crc32(k.encode("utf-8"))
        return int(k)

    def child(self, *keys) -> "RngStream":
        spawn = tuple(self._seq.spawn_key) + tuple(self._key(k) for k in keys)
        seq = np.random.SeedSequence(entropy=self._seq.entropy, spawn_key=spawn)
        return RngStream(_seq=seq)

    def normal(self, shape) -> np.ndarray:
        """Standard-normal draw in the global precision; counts values consumed."""
        out = self._gen.standard_normal(size=shape, dtype=_DTYPE)
        self.draws += out.size
        return out

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def seed_info(self) -> dict:
        return {"entropy": int(self._seq.entropy), "spawn_key": list(self._seq.spawn_key)}


class Tensor:
    """A dense array plus optional tape bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._bw = None
        self._backward_ran = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, bw) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._backward_ran = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._bw = bw
        else:
            out.requires_grad = False
            out._parents = ()
            out._bw = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut from the tape."""
        return Tensor(self.data)

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        a, b = self, self._coerce(other)
        out = a.data + b.data
        return Tensor._result(out, (a, b), lambda g: (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        ))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        a, b = self, self._coerce(other)
        out = a.data * b.data
        return Tensor._result(out, (a, b), lambda g: (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, self._coerce(other)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = _guard(a.data / b.data, "div")
        return Tensor._result(out, (a, b), lambda g: (
            _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if b.requires_grad else None,
        ))

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        with np.errstate(all="ignore"):
            out = _guard(self.data ** p, "pow")
        return Tensor._result(out, (self,), lambda g: (g * p * self.data ** (p - 1),))

    def __matmul__(self, other):
        a, b = self, self._coerce(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ValueError("matmul operands must have at least 2 dimensions")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ValueError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
        out = np.matmul(a.data, b.data)

        def bw(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
            return ga, gb

        return Tensor._result(out, (a, b), bw)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        out = self.data.reshape(shape)
        src = self.data.shape
        return Tensor._result(out, (self,), lambda g: (g.reshape(src),))

    def transpose(self, axes) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        shape = self.data.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[key] += g
            return (full,)

        return Tensor._result(out, (self,), bw)

    # -- reductions -------------------------------------------------------------

    def _reduce_bw(self, g, axis, keepdims, scale):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, self.data.shape) * scale

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        return Tensor._result(np.asarray(out), (self,),
                              lambda g: (self._reduce_bw(g, axis, keepdims, 1.0),))

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.mean(axis=axis, keepdims=keepdims)
        n = self.data.size / max(out.size, 1)
        return Tensor._result(np.asarray(out), (self,),
                              lambda g: (self._reduce_bw(g, axis, keepdims, 1.0 / n),))

    # -- elementwise nonlinearities ----------------------------------------------

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = _guard(np.exp(self.data), "exp")
        return Tensor._result(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = _guard(np.log(self.data), "log")
        return Tensor._result(out, (self,), lambda g: (g / self.data,))

    def sqrt(self) -> "Tensor":
        with np.errstate(invalid="ignore"):
            out = _guard(np.sqrt(self.data), "sqrt")
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0.0)
        return Tensor._result(out, (self,), lambda g: (g * (self.data > 0),))

    def sigmoid(self) -> "Tensor":
        out = expit(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self) -> "Tensor":
        out = np.logaddexp(0.0, self.data)
        return Tensor._result(out, (self,), lambda g: (g * expit(self.data),))

    def gelu(self) -> "Tensor":
        # exact form x * Phi(x); derivative Phi(x) + x * phi(x)
        x = self.data
        phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * phi_cdf
        return Tensor._result(out, (self,), lambda g: (
            g * (phi_cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),))

    # -- structured ops ---------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        """Softmax along ``axis`` with max-subtraction for stability."""
        if not -self.data.ndim <= axis < self.data.ndim:
            raise ValueError(f"softmax axis {axis} invalid for shape {self.data.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return ((g - dot) * out,)

        return Tensor._result(out, (self,), bw)

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Must be called on a finite scalar; calling it twice on the same
        node (without a fresh forward) is an error.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that does not require grad")
        if not np.isfinite(self.data).all():
            raise NumericGuardError("backward on a non-finite loss")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this graph; run a fresh forward")
        self._backward_ran = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or node._bw is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._bw is not None and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            grads = node._bw(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


# -- free functions -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def concat(tensors: list, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the inputs."""
    tensors = [Tensor._coerce(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, tensors))

    return Tensor._result(out, tuple(tensors), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(out, (table,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError("layer_norm gain/bias length must match the last axis")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gain + bias


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over positions, via log-sum-exp.

    ``weights`` optionally reweights positions (normalized by their sum);
    used for story-only loss masking.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects 2-D logits (positions x vocab)")
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError("target id out of vocabulary range")
    if weights is None:
        w = np.full(n, 1.0 / n, dtype=logits.data.dtype)
    else:
        weights = np.asarray(weights, dtype=logits.data.dtype)
        total = weights.sum()
        if total <= 0:
            raise ValueError("cross_entropy weights must have positive sum")
        w = weights / total

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    picked = logits.data[np.arange(n), targets]
    out = np.asarray((w * (lse - picked)).sum())

    def bw(g):
        soft = e / e.sum(axis=1, keepdims=True)
        soft[np.arange(n), targets] -= 1.0
        return (g * soft * w[:, None],)

    return Tensor._result(out, (logits,), bw)


def zero_grads(params) -> None:
    """Clear accumulated gradients; accepts tensors or (name, tensor) pairs."""
    for p in params:
        if isinstance(p, tuple):
            p = p[1]
        p.grad = None
