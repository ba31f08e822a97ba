"""Minimal reverse-mode autodiff over float64 numpy arrays.

The op set is deliberately closed: linear, softmax, attention, layer_norm,
elementwise add/mul, GELU (tanh approximation), reshape/transpose/concat/
indexing, and mean/sum reductions.  Every op has a hand-derived backward
rule and is checkable against central differences via finite_diff_check.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "ShapeError",
    "no_grad",
    "tensor",
    "zeros",
    "linear",
    "softmax",
    "attention",
    "layer_norm",
    "gelu",
    "concat",
    "finite_diff_check",
]

# GELU tanh-approximation constants (Hendrycks & Gimpel form).
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """n-dimensional float64 value with an optional autograd tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate gradients of self w.r.t. every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        data = self.data + other.data
        return Tensor._make(
            data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other
        data = a.data * b.data
        return Tensor._make(
            data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        data = a.data / b.data
        return Tensor._make(
            data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data**2), b.shape),
            ),
        )

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents supported")
        data = self.data**p
        return Tensor._make(
            data, (self,), lambda g: (g * p * self.data ** (p - 1),)
        )

    def sqrt(self):
        data = np.sqrt(self.data)
        return Tensor._make(data, (self,), lambda g: (g * 0.5 / data,))

    def exp(self):
        data = np.exp(self.data)
        return Tensor._make(data, (self,), lambda g: (g * data,))

    # -- shape ops -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(old),)
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a, b):
        return Tensor._make(
            self.data.swapaxes(a, b), (self,), lambda g: (g.swapaxes(a, b),)
        )

    def __getitem__(self, idx):
        data = self.data[idx]
        shape = self.shape

        def backward(g):
            out = np.zeros(shape, dtype=np.float64)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(data, (self,), backward)

    # -- matmul --------------------------------------------------------------
    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self, other
        try:
            data = a.data @ b.data
        except ValueError as exc:
            raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}: {exc}") from exc

        def backward(g):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                return (g * bd, ad * g)
            if ad.ndim == 1:
                ga = (np.expand_dims(g, -2) @ bd.swapaxes(-1, -2)).squeeze(-2)
                gb = np.expand_dims(ad, -1) @ np.expand_dims(g, -2)
                return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))
            if bd.ndim == 1:
                ga = np.expand_dims(g, -1) @ np.expand_dims(bd, -2)
                gb = ad.swapaxes(-1, -2) @ np.expand_dims(g, -1)
                return (_unbroadcast(ga, a.shape), _unbroadcast(gb.squeeze(-1), b.shape))
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

        return Tensor._make(data, (a, b), backward)

    # -- reductions ----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gx, shape).copy(),)

        return Tensor._make(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """y[..., j] = sum_i W[j, i] * x[..., i] (+ b[j])."""
    x, W = _wrap(x), _wrap(W)
    if x.shape[-1] != W.shape[-1]:
        raise ShapeError(
            f"linear: x has trailing extent {x.shape} but W is {W.shape}"
        )
    y = x @ W.swapaxes(-1, -2)
    if b is not None:
        b = _wrap(b)
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} vs W {W.shape}")
        y = y + b
    return y


def softmax(v: Tensor) -> Tensor:
    """Trailing-axis softmax with max-subtraction for stability."""
    v = _wrap(v)
    shifted = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Tensor._make(y, (v,), backward)


def attention(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; also returns the probability matrix.

    Q: [..., q, d], K: [..., k, d], V: [..., k, dv] -> ([..., q, dv], [..., q, k])
    """
    Q, K, V = _wrap(Q), _wrap(K), _wrap(V)
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeError(f"attention: Q {Q.shape} vs K {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: K {K.shape} vs V {V.shape}")
    scale = 1.0 / np.sqrt(Q.shape[-1])
    logits = (Q @ K.swapaxes(-1, -2)) * scale
    weights = softmax(logits)
    out = weights @ V
    return out, weights


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = gain.data * xhat + bias.data

    def backward(g):
        gy = g * gain.data
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return Tensor._make(y, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5x(1 + tanh(c(x + a x^3)))."""
    x = _wrap(x)
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd**3)
    t = np.tanh(inner)
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd**2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * dy,)

    return Tensor._make(y, (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered name -> Tensor mapping with a per-entry trainable flag."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._entries.items()

    def trainable_items(self) -> Iterable[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._entries.items() if self._trainable[n])

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool):
        if name not in self._entries:
            raise KeyError(name)
        self._trainable[name] = flag

    def freeze_all(self):
        for name in self._trainable:
            self._trainable[name] = False

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def checksum(self) -> str:
        """Byte-level digest of all entries, order-sensitive."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._entries.items():
            out.add(name, t.data.copy(), trainable=self._trainable[name])
        return out


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[ParamSet], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    subsample: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central differences.

    Returns the max relative error over sampled scalar coordinates, with
    denominator max(|analytic|, |numeric|, 1e-8).  Rejects non-deterministic
    loss functions by evaluating twice.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")

    params.zero_grad()
    loss = loss_fn(params)
    with no_grad():
        loss2 = loss_fn(params)
    if loss.data != loss2.data:
        raise ValueError("loss_fn is not deterministic across repeated evaluation")
    loss.backward()

    coords = []
    for name, t in params.trainable_items():
        for flat in range(t.size):
            coords.append((name, flat))
    if subsample is not None and subsample < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=subsample, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    max_rel = 0.0
    for name, flat in coords:
        t = params[name]
        analytic = 0.0 if t.grad is None else float(t.grad.reshape(-1)[flat])
        orig = t.data.reshape(-1)[flat]
        with no_grad():
            t.data.reshape(-1)[flat] = orig + eps
            f_plus = float(loss_fn(params).data)
            t.data.reshape(-1)[flat] = orig - eps
            f_minus = float(loss_fn(params).data)
            t.data.reshape(-1)[flat] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        rel = abs(analytic - numeric) / denom
        if rel > max_rel:
            max_rel = rel
    return max_rel
