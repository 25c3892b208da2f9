"""A tiny symbolic expression graph with point and interval evaluation.

Nodes are built with ordinary Python operators on :class:`Expr` objects::

    x = var(0)
    e = sin(x) * x + 2.0

Both evaluators memoise by node identity, so shared subexpressions are
evaluated once. A :class:`NetOut` node embeds a network whose interval image
is taken from the linear-relaxation bounds.
"""
from __future__ import annotations

import numpy as np

from ..errors import DivisionBySpanningZero, InvalidInput
from .bounds import IntervalBox, crown_dense_bounds, jacobian_interval, widen

TWO_PI = 2.0 * np.pi


class Expr:
    children: tuple = ()

    def __add__(self, o):
        return Add(self, _lift(o))

    def __radd__(self, o):
        return Add(_lift(o), self)

    def __sub__(self, o):
        return Sub(self, _lift(o))

    def __rsub__(self, o):
        return Sub(_lift(o), self)

    def __mul__(self, o):
        return Mul(self, _lift(o))

    def __rmul__(self, o):
        return Mul(_lift(o), self)

    def __truediv__(self, o):
        return Div(self, _lift(o))

    def __rtruediv__(self, o):
        return Div(_lift(o), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, k):
        if k != 2:
            raise InvalidInput("only squares are supported")
        return Square(self)


def _lift(o):
    return o if isinstance(o, Expr) else Const(float(o))


class Var(Expr):
    def __init__(self, index):
        self.index = int(index)


class Const(Expr):
    def __init__(self, value):
        self.value = float(value)


class _Unary(Expr):
    def __init__(self, a):
        self.children = (a,)


class _Binary(Expr):
    def __init__(self, a, b):
        self.children = (a, b)


class Add(_Binary):
    pass


class Sub(_Binary):
    pass


class Mul(_Binary):
    pass


class Div(_Binary):
    pass


class Neg(_Unary):
    pass


class Square(_Unary):
    pass


class Sin(_Unary):
    pass


class Cos(_Unary):
    pass


class NetOut(Expr):
    """Output ``index`` of ``net`` applied to the vector of child expressions."""

    def __init__(self, net, inputs, index=0):
        self.net = net
        self.children = tuple(inputs)
        self.index = int(index)


def var(i):
    return Var(i)


def sin(e):
    return Sin(_lift(e))


def cos(e):
    return Cos(_lift(e))


# --------------------------------------------------------------------------
# point evaluation
# --------------------------------------------------------------------------

def evaluate(exprs, X):
    """Evaluate one expression or a list at points ``X`` of shape ``(..., d)``."""
    X = np.asarray(X, dtype=float)
    memo = {}
    single = isinstance(exprs, Expr)
    out = [_ev(e, X, memo) for e in ([exprs] if single else exprs)]
    out = [np.broadcast_to(o, X.shape[:-1]).astype(float) for o in out]
    return out[0] if single else np.stack(out, axis=-1)


def _ev(e, X, memo):
    key = id(e)
    if key in memo:
        return memo[key]
    if isinstance(e, Var):
        v = X[..., e.index]
    elif isinstance(e, Const):
        v = np.float64(e.value)
    elif isinstance(e, NetOut):
        ins = np.stack([np.broadcast_to(_ev(c, X, memo), X.shape[:-1]) for c in e.children], axis=-1)
        flat = ins.reshape(-1, ins.shape[-1])
        v = e.net.forward(flat)[:, e.index].reshape(ins.shape[:-1])
    else:
        args = [_ev(c, X, memo) for c in e.children]
        if isinstance(e, Add):
            v = args[0] + args[1]
        elif isinstance(e, Sub):
            v = args[0] - args[1]
        elif isinstance(e, Mul):
            v = args[0] * args[1]
        elif isinstance(e, Div):
            v = args[0] / args[1]
        elif isinstance(e, Neg):
            v = -args[0]
        elif isinstance(e, Square):
            v = args[0] * args[0]
        elif isinstance(e, Sin):
            v = np.sin(args[0])
        elif isinstance(e, Cos):
            v = np.cos(args[0])
        else:
            raise InvalidInput(f"unknown node {type(e).__name__}")
    memo[key] = v
    return v


# --------------------------------------------------------------------------
# interval evaluation
# --------------------------------------------------------------------------

def _contains_point(lo, hi, phase):
    """Whether [lo, hi] contains phase + 2k*pi for some integer k."""
    k = np.ceil((lo - phase) / TWO_PI)
    return phase + k * TWO_PI <= hi


def _sin_interval(lo, hi):
    slo, shi = np.sin(lo), np.sin(hi)
    a, b = np.minimum(slo, shi), np.maximum(slo, shi)
    b = np.where(_contains_point(lo, hi, np.pi / 2), 1.0, b)
    a = np.where(_contains_point(lo, hi, -np.pi / 2), -1.0, a)
    a, b = widen(a, b, 2)
    return np.maximum(a, -1.0), np.minimum(b, 1.0)


def _cos_interval(lo, hi):
    clo, chi = np.cos(lo), np.cos(hi)
    a, b = np.minimum(clo, chi), np.maximum(clo, chi)
    b = np.where(_contains_point(lo, hi, 0.0), 1.0, b)
    a = np.where(_contains_point(lo, hi, np.pi), -1.0, a)
    a, b = widen(a, b, 2)
    return np.maximum(a, -1.0), np.minimum(b, 1.0)


def _mul_interval(al, ah, bl, bh):
    p1, p2, p3, p4 = al * bl, al * bh, ah * bl, ah * bh
    lo = np.minimum(np.minimum(p1, p2), np.minimum(p3, p4))
    hi = np.maximum(np.maximum(p1, p2), np.maximum(p3, p4))
    return widen(lo, hi)


def interval_eval(exprs, box: IntervalBox):
    """Sound enclosure of one expression (or a list) over a (batched) box."""
    memo = {}
    single = isinstance(exprs, Expr)
    shape = box.lower.shape[:-1]
    out = []
    for e in ([exprs] if single else exprs):
        lo, hi = _iv(e, box, memo)
        out.append((np.broadcast_to(lo, shape).astype(float), np.broadcast_to(hi, shape).astype(float)))
    if single:
        return IntervalBox(*out[0])
    return IntervalBox(np.stack([o[0] for o in out], axis=-1), np.stack([o[1] for o in out], axis=-1))


def _iv(e, box, memo):
    key = id(e)
    if key in memo:
        return memo[key]
    if isinstance(e, Var):
        r = (box.lower[..., e.index], box.upper[..., e.index])
    elif isinstance(e, Const):
        r = (np.float64(e.value), np.float64(e.value))
    elif isinstance(e, NetOut):
        shape = box.lower.shape[:-1]
        parts = [_iv(c, box, memo) for c in e.children]
        lo = np.stack([np.broadcast_to(p[0], shape) for p in parts], axis=-1)
        hi = np.stack([np.broadcast_to(p[1], shape) for p in parts], axis=-1)
        _, ob = crown_dense_bounds(e.net, IntervalBox(lo, hi))
        r = (ob.lower[..., e.index], ob.upper[..., e.index])
    else:
        args = [_iv(c, box, memo) for c in e.children]
        if isinstance(e, Add):
            r = widen(args[0][0] + args[1][0], args[0][1] + args[1][1])
        elif isinstance(e, Sub):
            r = widen(args[0][0] - args[1][1], args[0][1] - args[1][0])
        elif isinstance(e, Neg):
            r = (-args[0][1], -args[0][0])
        elif isinstance(e, Mul):
            r = _mul_interval(*args[0], *args[1])
        elif isinstance(e, Square):
            lo, hi = args[0]
            sq_lo, sq_hi = lo * lo, hi * hi
            top = np.maximum(sq_lo, sq_hi)
            bot = np.where((lo <= 0) & (hi >= 0), 0.0, np.minimum(sq_lo, sq_hi))
            a, b = widen(bot, top)
            r = (np.maximum(a, 0.0), b)
        elif isinstance(e, Div):
            (al, ah), (bl, bh) = args
            if np.any((bl <= 0) & (bh >= 0)):
                raise DivisionBySpanningZero("denominator interval contains zero")
            c = np.stack([al / bl, al / bh, ah / bl, ah / bh])
            r = widen(c.min(axis=0), c.max(axis=0))
        elif isinstance(e, Sin):
            r = _sin_interval(*args[0])
        elif isinstance(e, Cos):
            r = _cos_interval(*args[0])
        else:
            raise InvalidInput(f"unknown node {type(e).__name__}")
    memo[key] = r
    return r


# --------------------------------------------------------------------------
# interval gradients and the mean-value form
# --------------------------------------------------------------------------

def _gadd(a, b, sign=1.0):
    if sign > 0:
        return widen(a[0] + b[0], a[1] + b[1])
    return widen(a[0] - b[1], a[1] - b[0])


def _gscale(s, g):
    """Interval scalar (shape batch) times interval gradient (shape batch + (d,))."""
    return _mul_interval(s[0][..., None], s[1][..., None], g[0], g[1])


def interval_gradient(expr: Expr, box: IntervalBox):
    """Forward-mode interval differentiation: returns ``(value_lo, value_hi, grad_lo, grad_hi)``
    enclosing the expression and its gradient over ``box`` (Clarke gradient at ReLU kinks)."""
    vals = {}
    grads = {}
    shape = box.lower.shape[:-1]
    d = box.lower.shape[-1]
    zero = np.zeros(shape + (d,))

    def val(e):
        return _iv(e, box, vals)

    def grad(e):
        key = id(e)
        if key in grads:
            return grads[key]
        if isinstance(e, Var):
            g = np.zeros(shape + (d,))
            g[..., e.index] = 1.0
            r = (g, g)
        elif isinstance(e, Const):
            r = (zero, zero)
        elif isinstance(e, NetOut):
            shape_in = [np.broadcast_to(v, shape) for v in (val(c)[0] for c in e.children)]
            lo = np.stack(shape_in, axis=-1)
            hi = np.stack([np.broadcast_to(val(c)[1], shape) for c in e.children], axis=-1)
            Jlo, Jhi = jacobian_interval(e.net, IntervalBox(lo, hi))
            jl, jh = Jlo[..., e.index, :], Jhi[..., e.index, :]
            acc = (zero, zero)
            for k, c in enumerate(e.children):
                acc = _gadd(acc, _gscale((jl[..., k], jh[..., k]), grad(c)))
            r = acc
        else:
            a = e.children[0]
            if isinstance(e, Add):
                r = _gadd(grad(a), grad(e.children[1]))
            elif isinstance(e, Sub):
                r = _gadd(grad(a), grad(e.children[1]), -1.0)
            elif isinstance(e, Neg):
                ga = grad(a)
                r = (-ga[1], -ga[0])
            elif isinstance(e, Mul):
                b = e.children[1]
                r = _gadd(_gscale(val(b), grad(a)), _gscale(val(a), grad(b)))
            elif isinstance(e, Square):
                lo, hi = val(a)
                r = _gscale((2.0 * lo, 2.0 * hi), grad(a))
            elif isinstance(e, Div):
                b = e.children[1]
                q = val(e)
                bl, bh = val(b)
                num = _gadd(grad(a), _gscale(q, grad(b)), -1.0)
                # divide by a sign-definite interval: multiply by [1/bh, 1/bl]
                inv = widen(1.0 / bh, 1.0 / bl)
                r = _gscale(inv, num)
            elif isinstance(e, Sin):
                r = _gscale(_cos_interval(*val(a)), grad(a))
            elif isinstance(e, Cos):
                slo, shi = _sin_interval(*val(a))
                r = _gscale((-shi, -slo), grad(a))
            else:
                raise InvalidInput(f"unknown node {type(e).__name__}")
        grads[key] = r
        return r

    lo, hi = val(expr)
    glo, ghi = grad(expr)
    return (np.broadcast_to(lo, shape), np.broadcast_to(hi, shape),
            np.broadcast_to(glo, shape + (d,)), np.broadcast_to(ghi, shape + (d,)))


def mean_value_upper(expr: Expr, box: IntervalBox):
    """Upper bound ``e(c) + sum_i max|g_i| r_i`` at the box centre ``c``, intersected
    with the plain interval bound; the overestimate shrinks quadratically with the box."""
    _, hi, glo, ghi = interval_gradient(expr, box)
    c = box.center
    at_c = interval_eval(expr, IntervalBox(c, c)).upper
    slope = np.maximum(np.abs(glo), np.abs(ghi))
    spread = np.einsum("...d,...d->...", slope, box.radius)
    mv = at_c + spread * (1.0 + 4 * np.finfo(float).eps) + 1e-300
    return np.minimum(mv, hi)
