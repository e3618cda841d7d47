"""Dense tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a backward rule on the
result tensor. Nodes carry a monotonically increasing sequence number, so
replaying backward in descending sequence order is a valid reverse
topological order (a node is always recorded after its inputs).
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
RMS_EPS = 1e-6

_seq = itertools.count()


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Seeded 64-bit PCG generator; pass it explicitly to every initializer.

    ``stream`` derives an independent generator from the same seed.
    """
    if stream is None:
        return np.random.Generator(np.random.PCG64(int(seed)))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


class Tensor:
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None,
                 keep_dtype: bool = False):
        # user data is stored as float32; op results keep their dtype so a
        # float64 grad_check stays float64 end to end
        arr = np.asarray(data)
        if not (keep_dtype and arr.dtype.kind == "f"):
            arr = arr.astype(DTYPE, copy=False)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_seq)

    # -- construction helpers -------------------------------------------------
    @classmethod
    def zeros(cls, shape, requires_grad=False, name=None) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad, name)

    @classmethod
    def ones(cls, shape, requires_grad=False, name=None) -> "Tensor":
        return cls(np.ones(shape, dtype=DTYPE), requires_grad, name)

    @classmethod
    def randn(cls, rng: np.random.Generator, shape, std: float = 1.0,
              requires_grad=False, name=None) -> "Tensor":
        return cls((rng.standard_normal(shape) * std).astype(DTYPE), requires_grad, name)

    # -- basic properties -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), keep_dtype=True)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return tmean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return texp(self)

    # -- backward -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes or not node.requires_grad:
                continue
            nodes[id(node)] = node
            stack.extend(node._parents)

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, keep_dtype=True)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, keep_dtype=True)


# -- elementwise arithmetic -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def texp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _swish_derivative(z: np.ndarray) -> np.ndarray:
    s = _sigmoid(z)
    return s + z * s * (1.0 - s)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    out = x.data * _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * _swish_derivative(x.data),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

    return _node(out, (x,), backward)


# -- reductions and shape ops ---------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: (g.T,))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = out.copy()

    basic = isinstance(index, slice) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index))

    def backward(g):
        full = np.zeros_like(x.data, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of ``table`` selected by integer ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"token id out of range [0, {table.shape[0]})")
    return getitem(table, ids)


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with dA = dC Bᵀ and dB = Aᵀ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors, returned as a 0-d tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return _node(np.asarray(a.data @ b.data), (a, b), lambda g: (g * b.data, g * a.data))


# -- normalisation and attention primitives --------------------------------------

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction.

    ``mask`` is a boolean matrix of the same shape; False entries get exactly
    zero probability. Every row must keep at least one True entry.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise DimensionError(f"mask shape {mask.shape} does not match logits {z.shape}")
        if not mask.any(axis=1).all():
            raise ContractError("softmax_rows: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """y = x / sqrt(mean(x², last axis) + eps) * gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rms_norm gain {gain.shape} does not match width {x.shape[-1]}")
    n = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    out = xhat * gain.data

    def backward(g):
        gx = g * gain.data
        dx = r * (gx - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        dgain = (g * xhat).reshape(-1, n).sum(axis=0)
        return dx, dgain

    return _node(out, (x, gain), backward)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Tensor, targets: Sequence[int], weights: Sequence[float] | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under row softmax.

    Rows with weight 0 are excluded from the mean (loss masking).
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: all positions are masked")
    logp = log_softmax_rows(logits)
    picked = getitem(logp, (np.arange(len(targets)), targets))
    return -(picked * as_tensor(w.astype(logits.data.dtype))).sum() * (1.0 / total)


# -- gradient checking -----------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` is re-evaluated with each coordinate nudged by ±h. Parameters are
    promoted to float64 for the duration of the check (float32 differences are
    too coarse to resolve 1e-3 relative error) and restored afterwards.
    With ``max_coords`` only that many coordinates per tensor are probed,
    chosen by ``rng``.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError(f"grad_check step h={h} outside [1e-5, 1e-2]")
    params = list(params)
    saved = [(p.data, p.requires_grad, p.grad) for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None
        out = f()
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ContractError("grad_check: f must return a scalar tensor")
        out.backward()
        worst = 0.0
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or make_rng(0)).choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                central = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - central) / max(abs(a), abs(central), 1e-8)
                worst = max(worst, err)
        return worst
    finally:
        for p, (data, req, grad) in zip(params, saved):
            p.data, p.requires_grad, p.grad = data, req, grad
