"""CBF-QP safety filter on the simplex tangent space.

Solves

    min_f  1/2 ||f - f_hat||^2   s.t.  1^T f = b,  lower <= f <= upper

whose KKT solution is ``f = clip(f_hat + lam * 1, lower, upper)`` with a scalar
multiplier ``lam`` found by bisection on the (monotone, piecewise linear)
constraint residual. The batched entry point :func:`solve_batch` is what the
training and certification loops use; :func:`solve_cbf_qp` wraps it for one
problem and returns the binding-set bookkeeping needed for Jacobians.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateJacobian, Infeasible, InvalidInput, NumericalFailure

MAX_ITER = 200
SUM_TOL = 1e-10
DEGENERACY_TOL = 1e-6


@dataclass(frozen=True)
class ClassK:
    """Extended class-K function alpha(s) = c1 * (exp(c2 * s) - 1)."""

    c1: float = 100.0
    c2: float = 0.02

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise InvalidInput("class-K parameters must be positive")

    def __call__(self, s):
        return self.c1 * np.expm1(self.c2 * np.asarray(s, dtype=float))

    def derivative(self, s):
        return self.c1 * self.c2 * np.exp(self.c2 * np.asarray(s, dtype=float))

    def to_dict(self):
        return {"c1": float(self.c1), "c2": float(self.c2)}


def class_k_eval(alpha: ClassK, s):
    return alpha(s)


@dataclass
class QpProblem:
    f_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray | None = None
    b: float = 0.0

    def __post_init__(self):
        self.f_hat = np.asarray(self.f_hat, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        n = self.f_hat.shape[-1]
        if self.upper is None:
            self.upper = np.full(n, np.inf)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.f_hat.ndim != 1 or self.lower.shape != (n,) or self.upper.shape != (n,):
            raise InvalidInput("QP vectors must be 1-D and share a length")
        if not (np.all(np.isfinite(self.f_hat)) and np.all(np.isfinite(self.lower))):
            raise InvalidInput("QP data must be finite (upper may be +inf)")

    @property
    def n(self):
        return self.f_hat.size

    @classmethod
    def for_state(cls, f_hat, eta, alpha: ClassK, b: float = 0.0, upper=None):
        """Barrier constraints f_i >= -alpha(eta_i) keeping the simplex invariant."""
        return cls(f_hat=f_hat, lower=-alpha(eta), upper=upper, b=b)


@dataclass
class QpSolution:
    f: np.ndarray
    lam: float
    binding_lower: np.ndarray
    binding_upper: np.ndarray
    shifted: np.ndarray = field(repr=False)  # f_hat + lam before clipping

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.f.size, dtype=bool)
        mask[self.binding_lower] = False
        mask[self.binding_upper] = False
        return np.flatnonzero(mask)


def _clip_sum(f_hat, lam, lower, upper):
    return np.clip(f_hat + lam[:, None], lower, upper).sum(axis=1)


def solve_batch(f_hat, lower, upper=None, b=0.0, check=True):
    """Vectorised solver over rows. Returns ``(f, lam)``.

    ``upper`` may be None (all +inf). ``b`` may be a scalar or per-row array.
    Raises Infeasible if any row has an empty constraint set.
    """
    f_hat = np.atleast_2d(np.asarray(f_hat, dtype=float))
    lower = np.broadcast_to(np.asarray(lower, dtype=float), f_hat.shape)
    if upper is None:
        upper = np.full(f_hat.shape, np.inf)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), f_hat.shape)
    B = f_hat.shape[0]
    b = np.broadcast_to(np.asarray(b, dtype=float), (B,))

    if check:
        scale = 1.0 + np.abs(lower).sum(axis=1) + np.abs(b)
        bad = np.any(lower > upper, axis=1)
        bad |= lower.sum(axis=1) > b + 1e-12 * scale
        bad |= upper.sum(axis=1) < b - 1e-12 * scale
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise Infeasible(f"CBF-QP row {i} has an empty feasible set")

    # Bracket: at lam_lo every coordinate sits on its lower bound (sum <= b);
    # at lam_hi every coordinate is at or above it and the sum reaches b.
    lam_lo = (lower - f_hat).min(axis=1)
    finite_up = np.all(np.isfinite(upper), axis=1)
    lam_hi = np.empty(B)
    with np.errstate(invalid="ignore"):
        lam_hi[finite_up] = (upper - f_hat)[finite_up].max(axis=1) if finite_up.any() else 0.0
    inf_rows = ~finite_up
    if inf_rows.any():
        t = (lower - f_hat)[inf_rows].max(axis=1)
        g = _clip_sum(f_hat[inf_rows], t, lower[inf_rows], upper[inf_rows])
        # slope of the clipped sum is >= 1 past t (an unbounded coordinate is free)
        lam_hi[inf_rows] = t + np.maximum(b[inf_rows] - g, 0.0)

    lo, hi = lam_lo.copy(), lam_hi.copy()
    lam = 0.5 * (lo + hi)
    for _ in range(MAX_ITER):
        lam = 0.5 * (lo + hi)
        r = _clip_sum(f_hat, lam, lower, upper) - b
        if np.all(np.abs(r) < SUM_TOL):
            break
        below = r < 0
        lo = np.where(below, lam, lo)
        hi = np.where(below, hi, lam)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * (1.0 + np.abs(lam))):
            break

    # exact finish on the identified free set; kept only where it lowers the residual
    z = f_hat + lam[:, None]
    free = (z > lower) & (z < upper)
    m = free.sum(axis=1)
    clipped = np.where(free, 0.0, np.clip(z, lower, upper)).sum(axis=1)
    fsum = np.where(free, f_hat, 0.0).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_exact = np.where(m > 0, (b - clipped - fsum) / np.maximum(m, 1), lam)
    r_old = np.abs(_clip_sum(f_hat, lam, lower, upper) - b)
    r_new = np.abs(_clip_sum(f_hat, lam_exact, lower, upper) - b)
    lam = np.where(r_new <= r_old, lam_exact, lam)

    f = np.clip(f_hat + lam[:, None], lower, upper)
    resid = np.abs(f.sum(axis=1) - b)
    tol = 1e-8 * (1.0 + np.abs(f_hat).sum(axis=1) + np.abs(b))
    if check and np.any(resid > tol):
        i = int(np.argmax(resid - tol))
        raise NumericalFailure(f"bisection did not converge on row {i} (residual {resid[i]:.3e})")
    return f, lam


def solve_cbf_qp(problem: QpProblem) -> QpSolution:
    f, lam = solve_batch(problem.f_hat[None], problem.lower[None], problem.upper[None], problem.b)
    f, lam = f[0], float(lam[0])
    z = problem.f_hat + lam
    bl = np.flatnonzero(z <= problem.lower)
    bu = np.flatnonzero(z >= problem.upper)
    return QpSolution(f=f, lam=lam, binding_lower=bl, binding_upper=bu, shifted=z)


def is_degenerate(problem: QpProblem, solution: QpSolution, tol: float = DEGENERACY_TOL) -> bool:
    z = solution.shifted
    near = (np.abs(z - problem.lower) <= tol) | (np.abs(z - problem.upper) <= tol)
    return bool(np.any(near))


def qp_jacobians(problem: QpProblem, solution: QpSolution):
    """Derivatives of the solution map ``f(f_hat, lower, upper)``.

    Returns ``(d_f_d_fhat, d_f_d_lower, d_f_d_upper)``, each ``n x n`` with
    entry ``[i, j] = d f_i / d input_j``.
    """
    if is_degenerate(problem, solution):
        raise DegenerateJacobian("a coordinate lies within 1e-6 of a bound")
    n = problem.n
    free = solution.free
    m = free.size
    d_fhat = np.zeros((n, n))
    d_lower = np.zeros((n, n))
    d_upper = np.zeros((n, n))
    if m:
        d_fhat[np.ix_(free, free)] = np.eye(m) - 1.0 / m
    for j, D in ((solution.binding_lower, d_lower), (solution.binding_upper, d_upper)):
        for jj in j:
            D[jj, jj] = 1.0
            if m:
                D[free, jj] = -1.0 / m
    return d_fhat, d_lower, d_upper


def free_mask(f_hat, f, lam, lower, upper=None, tol: float = DEGENERACY_TOL):
    """Batched free/degenerate classification used in training.

    Returns ``(free, degenerate)`` boolean arrays; ``free`` has shape (B, n),
    ``degenerate`` has shape (B,).
    """
    z = np.atleast_2d(f_hat) + np.asarray(lam)[:, None]
    lower = np.broadcast_to(lower, z.shape)
    upper = np.full(z.shape, np.inf) if upper is None else np.broadcast_to(upper, z.shape)
    free = (z > lower) & (z < upper)
    near = (np.abs(z - lower) <= tol) | (np.abs(z - upper) <= tol)
    return free, np.any(near, axis=1)


def vjp_fhat(free, g):
    """Row-wise ``g^T d f / d f_hat``: centre ``g`` over the free set, zero elsewhere."""
    g = np.asarray(g, dtype=float)
    m = free.sum(axis=1, keepdims=True)
    mean = np.where(m > 0, (g * free).sum(axis=1, keepdims=True) / np.maximum(m, 1), 0.0)
    return np.where(free, g - mean, 0.0)


def vjp_lower(free, binding_lower, g):
    """Row-wise ``g^T d f / d lower``."""
    g = np.asarray(g, dtype=float)
    m = free.sum(axis=1, keepdims=True)
    mean = np.where(m > 0, (g * free).sum(axis=1, keepdims=True) / np.maximum(m, 1), 0.0)
    return np.where(binding_lower, g - mean, 0.0)
