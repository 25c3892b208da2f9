"""Sound enclosures: interval propagation, backward linear relaxation (CROWN-style),
and interval bounds through the CBF-QP layer.

Boxes are batched: ``lower``/``upper`` have shape ``(..., d)``. Every floating
operation is rounded outward by one or two ulps so enclosures stay sound
against the same float evaluation they are checked with.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cbf_qp import ClassK, solve_batch
from ..errors import InvalidInput

_EPS = np.finfo(float).eps


def widen(lo, hi, ulps: int = 1):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    for _ in range(ulps):
        lo = np.nextafter(lo, -np.inf)
        hi = np.nextafter(hi, np.inf)
    return lo, hi


@dataclass
class IntervalBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise InvalidInput("interval bounds have different shapes")
        if np.any(self.lower > self.upper):
            raise InvalidInput("interval box has lower > upper")

    @classmethod
    def around(cls, center, radius):
        center = np.asarray(center, dtype=float)
        return cls(center - radius, center + radius)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self):
        return 0.5 * (self.upper - self.lower)

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, pts, tol: float = 0.0):
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lower - tol) & (pts <= self.upper + tol), axis=-1)

    def subset_of(self, other: "IntervalBox", tol: float = 0.0) -> bool:
        return bool(np.all(self.lower >= other.lower - tol) and np.all(self.upper <= other.upper + tol))

    def intersect(self, other: "IntervalBox") -> "IntervalBox":
        lo = np.maximum(self.lower, other.lower)
        hi = np.minimum(self.upper, other.upper)
        if np.any(lo > hi):
            raise InvalidInput("boxes do not intersect")
        return IntervalBox(lo, hi)

    def clip(self, lo, hi) -> "IntervalBox":
        return IntervalBox(np.clip(self.lower, lo, hi), np.clip(self.upper, lo, hi))

    def sample(self, rng, count):
        """Uniform draws; for a batch of boxes returns ``(count, ..., d)``."""
        u = rng.random((count,) + self.lower.shape)
        return self.lower + u * (self.upper - self.lower)

    def __getitem__(self, idx):
        return IntervalBox(self.lower[idx], self.upper[idx])


@dataclass
class LinearBounds:
    """``A_lower z + b_lower <= f(z) <= A_upper z + b_upper`` over the input box.

    ``A_*`` have shape ``(..., m, d)``, ``b_*`` shape ``(..., m)``.
    """

    A_lower: np.ndarray
    b_lower: np.ndarray
    A_upper: np.ndarray
    b_upper: np.ndarray

    def evaluate(self, z):
        z = np.asarray(z, dtype=float)
        lo = np.einsum("...md,...d->...m", self.A_lower, z) + self.b_lower
        hi = np.einsum("...md,...d->...m", self.A_upper, z) + self.b_upper
        return lo, hi

    def concretize(self, box: IntervalBox) -> IntervalBox:
        c, r = box.center, box.radius
        lo = np.einsum("...md,...d->...m", self.A_lower, c) - np.einsum("...md,...d->...m", np.abs(self.A_lower), r) + self.b_lower
        hi = np.einsum("...md,...d->...m", self.A_upper, c) + np.einsum("...md,...d->...m", np.abs(self.A_upper), r) + self.b_upper
        mag_lo = np.einsum("...md,...d->...m", np.abs(self.A_lower), np.abs(c) + r) + np.abs(self.b_lower)
        mag_hi = np.einsum("...md,...d->...m", np.abs(self.A_upper), np.abs(c) + r) + np.abs(self.b_upper)
        # covers rounding accumulated in the backward pass as well as here
        return IntervalBox(lo - 1e-12 * mag_lo, hi + 1e-12 * mag_hi)


# --------------------------------------------------------------------------
# interval propagation through affine/ReLU chains
# --------------------------------------------------------------------------

def _affine_interval(W, b, c, r):
    Wa = np.abs(W)
    c2 = c @ W.T + b
    r2 = r @ Wa.T
    # accumulated rounding of the two matrix products
    pad = 2 * (W.shape[1] + 2) * _EPS * ((np.abs(c) + r) @ Wa.T + np.abs(b)) + 1e-300
    return c2, r2 + pad


def interval_chain(chain, box: IntervalBox, record=False):
    """Propagate a box through ``[(W, b) | "relu", ...]``.

    With ``record=True`` also returns the list of pre-activation boxes (one per ReLU).
    """
    lo, hi = box.lower, box.upper
    pre = []
    for layer in chain:
        if isinstance(layer, str):
            if layer != "relu":
                raise InvalidInput(f"unsupported chain element {layer!r}")
            pre.append(IntervalBox(lo, hi))
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            W, b = layer
            c, r = _affine_interval(W, b, 0.5 * (lo + hi), 0.5 * (hi - lo))
            lo, hi = c - r, c + r
    out = IntervalBox(lo, hi)
    return (out, pre) if record else out


def interval_forward(target, box: IntervalBox):
    """Interval enclosure of a network (layer chain / Sequential) or an expression graph."""
    from .expr import Expr, interval_eval

    if isinstance(target, Expr) or (isinstance(target, (list, tuple)) and target and isinstance(target[0], Expr)):
        return interval_eval(target, box)
    chain = target.affine_chain() if hasattr(target, "affine_chain") else target
    return interval_chain(chain, box)


# --------------------------------------------------------------------------
# backward linear relaxation
# --------------------------------------------------------------------------

def _relu_relaxation(l, u):
    """Slopes/intercepts of the linear envelopes of ReLU on [l, u].

    Unstable neurons: upper chord through (l, 0) and (u, u); lower line
    through the origin with the same slope u / (u - l).
    """
    active = l >= 0
    unstable = (l < 0) & (u > 0)
    denom = np.where(unstable, u - l, 1.0)
    s = np.where(unstable, u / denom, np.where(active, 1.0, 0.0))
    up_slope = s
    up_icpt = np.where(unstable, -s * l, 0.0)
    lo_slope = s
    return up_slope, up_icpt, lo_slope


def _backward(chain, upto, relax, m_dim, batch_shape):
    """Backward pass from the output of ``chain[:upto]`` to the input."""
    eye = np.broadcast_to(np.eye(m_dim), batch_shape + (m_dim, m_dim))
    AU, AL = eye.copy(), eye.copy()
    bU = np.zeros(batch_shape + (m_dim,))
    bL = np.zeros(batch_shape + (m_dim,))
    relu_idx = sum(1 for x in chain[:upto] if isinstance(x, str))
    for layer in reversed(chain[:upto]):
        if isinstance(layer, str):
            relu_idx -= 1
            us, ui, ls = relax[relu_idx]
            us_, ui_, ls_ = us[..., None, :], ui[..., None, :], ls[..., None, :]
            AUp, AUn = np.maximum(AU, 0.0), np.minimum(AU, 0.0)
            ALp, ALn = np.maximum(AL, 0.0), np.minimum(AL, 0.0)
            bU = bU + (AUp * ui_).sum(-1)
            bL = bL + (ALn * ui_).sum(-1)
            AU = AUp * us_ + AUn * ls_
            AL = ALp * ls_ + ALn * us_
        else:
            W, b = layer
            bU = bU + AU @ b
            bL = bL + AL @ b
            AU = AU @ W
            AL = AL @ W
    return LinearBounds(AL, bL, AU, bU)


def crown_dense_bounds(target, box: IntervalBox, record=False):
    """Backward linear relaxation for affine+ReLU chains.

    Returns ``(LinearBounds, IntervalBox)``. Each intermediate pre-activation
    box is intersected with its interval-propagation counterpart, and so is
    the output, so the concretised box is never looser than
    :func:`interval_forward`. With ``record=True`` the pre-activation boxes
    (one per ReLU) are appended to the result.
    """
    chain = target.affine_chain() if hasattr(target, "affine_chain") else list(target)
    batch_shape = box.lower.shape[:-1]
    relax = []
    pre = []
    lo, hi = box.lower, box.upper
    # plain interval chain, carried alongside so the result is never looser than it
    ilo, ihi = lo, hi
    lin = None
    for t, layer in enumerate(chain):
        if isinstance(layer, str):
            pre.append(IntervalBox(lo, hi))
            relax.append(_relu_relaxation(lo, hi))
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
            ilo, ihi = np.maximum(ilo, 0.0), np.maximum(ihi, 0.0)
            continue
        W, b = layer
        c, r = _affine_interval(W, b, 0.5 * (lo + hi), 0.5 * (hi - lo))
        ic, ir = _affine_interval(W, b, 0.5 * (ilo + ihi), 0.5 * (ihi - ilo))
        ilo, ihi = ic - ir, ic + ir
        lin = _backward(chain, t + 1, relax, W.shape[0], batch_shape)
        cb = lin.concretize(box)
        lo = np.maximum(np.maximum(cb.lower, c - r), ilo)
        hi = np.minimum(np.minimum(cb.upper, c + r), ihi)
    if lin is None:
        raise InvalidInput("chain has no affine layer")
    if record:
        return lin, IntervalBox(lo, hi), pre
    return lin, IntervalBox(lo, hi)


def jacobian_interval(target, box: IntervalBox):
    """Elementwise enclosure ``(J_lo, J_hi)`` of the (Clarke) Jacobian of an
    affine+ReLU chain over ``box``; shapes ``(..., m, d)``.

    ReLU slopes are 1 / 0 on stable neurons and the interval [0, 1] on
    unstable ones, using the linear-relaxation pre-activation boxes.
    """
    chain = target.affine_chain() if hasattr(target, "affine_chain") else list(target)
    _, _, pre = crown_dense_bounds(chain, box, record=True)
    batch_shape = box.lower.shape[:-1]
    Jlo = Jhi = None
    k = 0
    for layer in chain:
        if isinstance(layer, str):
            l, u = pre[k].lower, pre[k].upper
            k += 1
            dl = np.where(l >= 0, 1.0, 0.0)[..., :, None]
            du = np.where(u > 0, 1.0, 0.0)[..., :, None]
            c = np.stack([dl * Jlo, dl * Jhi, du * Jlo, du * Jhi])
            Jlo, Jhi = c.min(axis=0), c.max(axis=0)
            continue
        W, _ = layer
        if Jlo is None:
            Jlo = np.broadcast_to(W, batch_shape + W.shape).copy()
            Jhi = Jlo.copy()
            continue
        c, r = 0.5 * (Jlo + Jhi), 0.5 * (Jhi - Jlo)
        Wa = np.abs(W)
        c2 = W @ c
        r2 = Wa @ r
        pad = 2 * (W.shape[1] + 2) * _EPS * (Wa @ (np.abs(c) + r)) + 1e-300
        Jlo, Jhi = c2 - r2 - pad, c2 + r2 + pad
    return Jlo, Jhi


# --------------------------------------------------------------------------
# interval bounds through the CBF-QP layer
# --------------------------------------------------------------------------

def qp_interval_bounds(eta_box: IntervalBox, fhat_box: IntervalBox, alpha: ClassK, b: float = 0.0,
                       upper_fn=None) -> IntervalBox:
    """Per-coordinate bounds on the filtered dynamics over a state box and raw-output box.

    Coordinate ``i``'s lower bound solves the QP with ``eta_i`` at its upper
    end (others at their lower ends) and ``f_hat_i`` at its lower end (others
    at their upper ends); the upper bound uses the mirrored corner. The lower
    constraint is ``-alpha(eta)`` and ``upper_fn(eta)`` (default +inf); both
    are non-increasing in ``eta``. Raises Infeasible if a corner QP is empty.
    """
    el, eu = np.atleast_2d(eta_box.lower), np.atleast_2d(eta_box.upper)
    fl, fu = np.atleast_2d(fhat_box.lower), np.atleast_2d(fhat_box.upper)
    B, n = el.shape
    if fl.shape != (B, n):
        raise InvalidInput("state and raw-output boxes must share shape")
    eye = np.eye(n, dtype=bool)
    # rows (B, n): row i of the corner matrix picks "own" coordinate i
    eta_lbq = np.where(eye, eu[:, None, :], el[:, None, :])   # for lower bounds
    fh_lbq = np.where(eye, fl[:, None, :], fu[:, None, :])
    eta_ubq = np.where(eye, el[:, None, :], eu[:, None, :])   # for upper bounds
    fh_ubq = np.where(eye, fu[:, None, :], fl[:, None, :])
    E = np.concatenate([eta_lbq, eta_ubq], axis=1).reshape(-1, n)
    F = np.concatenate([fh_lbq, fh_ubq], axis=1).reshape(-1, n)
    up = None if upper_fn is None else upper_fn(E)
    sol, _ = solve_batch(F, -alpha(E), up, b)
    sol = sol.reshape(B, 2, n, n)
    lo = np.diagonal(sol[:, 0], axis1=1, axis2=2)
    hi = np.diagonal(sol[:, 1], axis1=1, axis2=2)
    pad_lo = 1e-10 * (1.0 + np.abs(lo))
    pad_hi = 1e-10 * (1.0 + np.abs(hi))
    out = IntervalBox(lo - pad_lo, hi + pad_hi)
    if np.ndim(eta_box.lower) == 1:
        return out[0]
    return out
