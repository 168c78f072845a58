"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` records the operations applied to it on an implicit tape (the
graph of parent links); ``Tensor.backward()`` runs the reverse sweep in
topological order and accumulates gradients into ``.grad``.

The module-level math functions (``tanh``, ``sin``, ``where``, ...) dispatch on
their argument type: plain ndarrays/floats go straight through numpy, Tensors
are recorded.  This lets the dynamics code be written once and evaluated either
as fast numpy (controller rollouts) or as a differentiable graph (training).

Everything is float64; all ops are deterministic.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "is_tensor",
    "value_of",
    "constant",
    "sin",
    "cos",
    "tanh",
    "arctan",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "absolute",
    "sign",
    "maximum",
    "minimum",
    "where",
    "clip",
    "stack",
    "concat",
    "matmul",
    "transpose_last2",
    "sum_",
    "mean_",
    "solve_psd",
    "logdet_psd",
    "wrap_angle",
    "global_norm",
    "clip_global_norm",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the reverse-mode graph wrapping a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_vjp", "requires_grad")

    is_tensor = True

    def __init__(self, value, requires_grad=False, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None

    # -- graph -------------------------------------------------------------

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen = set()
        stack_ = [self]
        # iterative DFS topological sort; graphs from long rollouts are deep
        while stack_:
            node = stack_[-1]
            if id(node) in seen:
                stack_.pop()
                continue
            ready = True
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack_.append(p)
                    ready = False
            if ready:
                seen.add(id(node))
                stack_.pop()
                order.append(node)
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(node.grad)):
                if contrib is None or not parent.requires_grad:
                    continue
                contrib = _unbroadcast(np.asarray(contrib, dtype=np.float64), parent.value.shape)
                if parent.grad is None:
                    parent.grad = contrib.copy()
                else:
                    parent.grad += contrib

    def zero_grad(self):
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        o = _as_tensor(other)
        return Tensor(self.value + o.value, _parents=(self, o), _vjp=lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        o = _as_tensor(other)
        return Tensor(self.value - o.value, _parents=(self, o), _vjp=lambda g: (g, -g))

    def __rsub__(self, other):
        o = _as_tensor(other)
        return o.__sub__(self)

    def __mul__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.value * o.value,
            _parents=(self, o),
            _vjp=lambda g, a=self.value, b=o.value: (g * b, g * a),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _as_tensor(other)
        return Tensor(
            self.value / o.value,
            _parents=(self, o),
            _vjp=lambda g, a=self.value, b=o.value: (g / b, -g * a / (b * b)),
        )

    def __rtruediv__(self, other):
        o = _as_tensor(other)
        return o.__truediv__(self)

    def __neg__(self):
        return Tensor(-self.value, _parents=(self,), _vjp=lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only constant exponents are supported")
        return Tensor(
            self.value**p,
            _parents=(self,),
            _vjp=lambda g, a=self.value: (g * p * a ** (p - 1),),
        )

    def __getitem__(self, idx):
        def vjp(g, idx=idx, shape=self.value.shape):
            out = np.zeros(shape)
            out[idx] = g
            return (out,)

        return Tensor(self.value[idx], _parents=(self,), _vjp=vjp)

    def reshape(self, *shape):
        old = self.value.shape
        return Tensor(
            self.value.reshape(*shape),
            _parents=(self,),
            _vjp=lambda g: (g.reshape(old),),
        )

    def sum(self, axis=None, keepdims=False):
        def vjp(g, axis=axis, keepdims=keepdims, shape=self.value.shape):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), _parents=(self,), _vjp=vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x):
    """Underlying ndarray/scalar of `x` whether or not it is a Tensor."""
    return x.value if isinstance(x, Tensor) else x


def constant(x) -> Tensor:
    return Tensor(x)


# -- dispatched elementwise functions ----------------------------------------


def _unary(x, fn, dfn):
    if isinstance(x, Tensor):
        y = fn(x.value)
        return Tensor(y, _parents=(x,), _vjp=lambda g, a=x.value, b=y: (g * dfn(a, b),))
    return fn(x)


def sin(x):
    return _unary(x, np.sin, lambda a, b: np.cos(a))


def cos(x):
    return _unary(x, np.cos, lambda a, b: -np.sin(a))


def tanh(x):
    return _unary(x, np.tanh, lambda a, b: 1.0 - b * b)


def arctan(x):
    return _unary(x, np.arctan, lambda a, b: 1.0 / (1.0 + a * a))


def exp(x):
    return _unary(x, np.exp, lambda a, b: b)


def log(x):
    return _unary(x, np.log, lambda a, b: 1.0 / a)


def sqrt(x):
    return _unary(x, np.sqrt, lambda a, b: 0.5 / b)


def _sigmoid_np(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    return _unary(x, _sigmoid_np, lambda a, b: b * (1.0 - b))


def absolute(x):
    # subgradient 0 at the kink
    return _unary(x, np.abs, lambda a, b: np.sign(a))


def sign(x):
    """Piecewise-constant sign; gradient is zero everywhere."""
    if isinstance(x, Tensor):
        return Tensor(np.sign(x.value))
    return np.sign(x)


def maximum(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        ta, tb = _as_tensor(a), _as_tensor(b)
        mask = ta.value >= tb.value
        return Tensor(
            np.maximum(ta.value, tb.value),
            _parents=(ta, tb),
            _vjp=lambda g, m=mask: (g * m, g * (~m)),
        )
    return np.maximum(a, b)


def minimum(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        ta, tb = _as_tensor(a), _as_tensor(b)
        mask = ta.value <= tb.value
        return Tensor(
            np.minimum(ta.value, tb.value),
            _parents=(ta, tb),
            _vjp=lambda g, m=mask: (g * m, g * (~m)),
        )
    return np.minimum(a, b)


def where(cond, a, b):
    """Branch select; `cond` is treated as a constant (no gradient)."""
    cond = value_of(cond)
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        ta, tb = _as_tensor(a), _as_tensor(b)
        return Tensor(
            np.where(cond, ta.value, tb.value),
            _parents=(ta, tb),
            _vjp=lambda g, c=cond: (g * c, g * (~np.asarray(c, dtype=bool))),
        )
    return np.where(cond, a, b)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def wrap_angle(x):
    """Wrap to (-pi, pi]; the 2*pi jumps carry no gradient."""
    shift = value_of(x)
    k = np.floor((shift + np.pi) / (2.0 * np.pi)) * (2.0 * np.pi)
    if isinstance(x, Tensor):
        return x - k
    return x - k


# -- shape ops ----------------------------------------------------------------


def stack(xs, axis=-1):
    if any(isinstance(x, Tensor) for x in xs):
        ts = [_as_tensor(x) for x in xs]
        vals = np.stack([t.value for t in ts], axis=axis)

        def vjp(g, axis=axis, n=len(ts)):
            return tuple(np.take(g, i, axis=axis) for i in range(n))

        return Tensor(vals, _parents=tuple(ts), _vjp=vjp)
    return np.stack(xs, axis=axis)


def concat(xs, axis=-1):
    if any(isinstance(x, Tensor) for x in xs):
        ts = [_as_tensor(x) for x in xs]
        vals = np.concatenate([t.value for t in ts], axis=axis)
        sizes = [t.value.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g, axis=axis, offsets=offsets, n=len(ts)):
            sl = [slice(None)] * g.ndim
            outs = []
            for i in range(n):
                sl[axis] = slice(offsets[i], offsets[i + 1])
                outs.append(g[tuple(sl)])
            return tuple(outs)

        return Tensor(vals, _parents=tuple(ts), _vjp=vjp)
    return np.concatenate(xs, axis=axis)


def matmul(a, b):
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        ta, tb = _as_tensor(a), _as_tensor(b)

        def vjp(g, av=ta.value, bv=tb.value):
            if bv.ndim == 1:
                ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            else:
                ga = g @ np.swapaxes(bv, -1, -2)
            if av.ndim == 1:
                gb = np.multiply.outer(av, g) if bv.ndim > 1 else av * g
            else:
                gb = np.swapaxes(av, -1, -2) @ g
            return (ga, gb)

        return Tensor(ta.value @ tb.value, _parents=(ta, tb), _vjp=vjp)
    return a @ b


def transpose_last2(x):
    if isinstance(x, Tensor):
        return Tensor(
            np.swapaxes(x.value, -1, -2),
            _parents=(x,),
            _vjp=lambda g: (np.swapaxes(g, -1, -2),),
        )
    return np.swapaxes(x, -1, -2)


def sum_(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean_(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.mean(axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


# -- linear-algebra ops with hand-written adjoints ----------------------------


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix that must be PD fails its Cholesky factorization."""


def _chol(p):
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError(str(err)) from err


def _cho_solve(l, b):
    y = np.linalg.solve(l, b[..., None] if b.ndim == l.ndim - 1 else b)
    x = np.linalg.solve(np.swapaxes(l, -1, -2), y)
    return x[..., 0] if b.ndim == l.ndim - 1 else x


def solve_psd(p, b):
    """x = P^{-1} b for symmetric positive definite P, via Cholesky.

    P is symmetrized internally so finite-difference checks of arbitrary
    entry perturbations match the adjoint.
    """
    if isinstance(p, Tensor) or isinstance(b, Tensor):
        tp, tb = _as_tensor(p), _as_tensor(b)
        psym = 0.5 * (tp.value + np.swapaxes(tp.value, -1, -2))
        l = _chol(psym)
        x = _cho_solve(l, tb.value)

        def vjp(g, l=l, x=x):
            gb = _cho_solve(l, g)
            gp_full = -gb[..., :, None] * x[..., None, :]
            gp = 0.5 * (gp_full + np.swapaxes(gp_full, -1, -2))
            return (gp, gb)

        return Tensor(x, _parents=(tp, tb), _vjp=vjp)
    psym = 0.5 * (p + np.swapaxes(p, -1, -2))
    return _cho_solve(_chol(psym), b)


def logdet_psd(p):
    """log|P| for symmetric positive definite P (symmetrized internally)."""
    if isinstance(p, Tensor):
        psym = 0.5 * (p.value + np.swapaxes(p.value, -1, -2))
        l = _chol(psym)
        val = 2.0 * np.sum(np.log(np.diagonal(l, axis1=-2, axis2=-1)), axis=-1)

        def vjp(g, l=l, n=p.value.shape[-1]):
            eye = np.broadcast_to(np.eye(n), l.shape).copy()
            pinv = _cho_solve(l, eye)
            return (g[..., None, None] * pinv,)

        return Tensor(val, _parents=(p,), _vjp=vjp)
    psym = 0.5 * (p + np.swapaxes(p, -1, -2))
    l = _chol(psym)
    return 2.0 * np.sum(np.log(np.diagonal(l, axis1=-2, axis2=-1)), axis=-1)


# -- gradient utilities --------------------------------------------------------


def global_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def clip_global_norm(tensors, max_norm: float) -> float:
    norm = global_norm(tensors)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for t in tensors:
            if t.grad is not None:
                t.grad *= scale
    return norm
