"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape`.  Outside a tape,
or when no input requires a gradient, nothing is recorded and results are
plain constants, which is how the teacher branch and evaluation run.

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

EPS_NORM = 1e-12
EPS_LOG = 1e-12

_TAPES: list["Tape"] = []


class DegenerateVectorError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonFiniteError(ValueError, FloatingPointError):
    """NaN or Inf where a finite value is required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "stop_gradient")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.stop_gradient = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut from the graph; backward deposits nothing upstream."""
        out = Tensor(self.data)
        out.stop_gradient = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations; backward runs once."""

    def __init__(self):
        self.records: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, root: Tensor, seed: np.ndarray | None = None) -> None:
        if self._used:
            raise TapeError("backward() already ran on this tape")
        self._used = True
        if not root.requires_grad:
            return
        if seed is None:
            if root.data.size != 1:
                raise TapeError("backward() without a seed needs a scalar root")
            seed = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
        for inputs, out, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            local = rule(g)
            for inp, gi in zip(inputs, local):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves
        leaves = {id(inp): inp for inputs, _, _ in self.records for inp in inputs}
        leaves[id(root)] = root
        for key, g in grads.items():
            t = leaves.get(key)
            if t is not None and t.requires_grad:
                _accumulate(t, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise TapeError(f"gradient shape {g.shape} does not match tensor {t.data.shape}")
    t.grad = g.copy() if t.grad is None else t.grad + g


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(out_data)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].records.append((tuple(inputs), out, rule))
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    # trailing-dimension expansion only
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim == 0:
        return
    if big.shape[big.ndim - small.ndim:] != small.shape:
        raise ValueError(f"cannot broadcast {a.shape} with {b.shape}: only trailing expansion")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    return g.reshape(shape)


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        k = float(b)
        a = as_tensor(a)
        return _record(a.data * k, (a,), lambda g: (g * k,))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor, eps: float = EPS_LOG) -> Tensor:
    """Natural log with the argument floored at ``eps``; clamped entries get no gradient."""
    x = a.data
    clamped = np.maximum(x, eps)
    return _record(np.log(clamped), (a,), lambda g: (np.where(x > eps, g / clamped, 0.0),))


def _gelu_derivative(x: np.ndarray, cdf: np.ndarray) -> np.ndarray:
    return cdf + x * np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    # looked up at call time so a broken rule can be injected in tests
    return _record(x * cdf, (a,), lambda g: (g * _gelu_derivative(x, cdf),))


# shape


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if shape[len(shape) - a.ndim:] != a.shape:
        raise ValueError(f"broadcast_to {a.shape} -> {shape}: only leading expansion")
    src = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in parts)


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    basic = _is_basic(idx)

    def rule(g):
        out = np.zeros(src)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), rule)


def take(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    src = table.shape

    def rule(g):
        out = np.zeros(src)
        np.add.at(out, indices, g)
        return (out,)

    return _record(table.data[indices], (table,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes; a 2-D right operand is shared across the batch."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs operands with at least two dimensions")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    out = np.matmul(ad, bd)

    def rule(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), rule)


# fused normalizations


def softmax(v: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """softmax(v / tau) along ``axis`` with max-subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    v = as_tensor(v)
    if not np.all(np.isfinite(v.data)):
        raise NonFiniteError("softmax input contains NaN or Inf")
    z = v.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner) / tau,)

    return _record(s, (v,), rule)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    v = as_tensor(v)
    x = v.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError("cannot normalize a vector with near-zero norm")
    u = x / norm

    def rule(g):
        return ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,)

    return _record(u, (v,), rule)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the learnable affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    w, b = weight.data, bias.data
    n = xd.shape[-1]

    def rule(g):
        gw = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        gh = g * w
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return _record(xhat * w + b, (x, weight, bias), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# verification


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Worst relative error between backprop and central differences.

    ``x`` is one tensor or a sequence of tensors; ``f`` receives them
    positionally.  Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*xs)
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
        worst = 0.0
        for t in xs:
            analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)  # view: perturbs t.data in place
            ana = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(*xs).item()
                flat[i] = orig - eps
                lo = f(*xs).item()
                flat[i] = orig
                num = (hi - lo) / (2.0 * eps)
                worst = max(worst, abs(ana[i] - num) / max(1.0, abs(ana[i])))
        return worst
    finally:
        for t, rg in zip(xs, saved):
            t.requires_grad = rg
            t.grad = None
