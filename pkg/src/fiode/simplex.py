"""Probability-simplex geometry and the potential functions used as Lyapunov/barrier candidates.

All potentials accept either a single state ``(n,)`` or a batch ``(B, n)`` and
return values with the leading batch shape preserved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

SIMPLEX_TOL = 1e-9
TIE_TOL = 1e-9


@dataclass(frozen=True)
class SimplexPoint:
    coords: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.ndim != 1 or c.size < 1:
            raise InvalidInput("simplex point must be a non-empty vector")
        if not np.all(np.isfinite(c)):
            raise InvalidInput("simplex point has non-finite coordinates")
        if np.any(c < -SIMPLEX_TOL) or abs(c.sum() - 1.0) > SIMPLEX_TOL:
            raise InvalidInput(f"not on the probability simplex: {c}")
        object.__setattr__(self, "coords", c)

    @property
    def n(self) -> int:
        return self.coords.size


def uniform_point(n: int) -> np.ndarray:
    """The input-independent initial state 1/n."""
    return np.full(n, 1.0 / n)


def on_simplex(eta, tol: float = SIMPLEX_TOL) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    return np.all(eta >= -tol, axis=-1) & (np.abs(eta.sum(axis=-1) - 1.0) <= tol)


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold).

    Works row-wise on batches. Raises InvalidInput on non-finite input.
    """
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InvalidInput("cannot project non-finite vector onto the simplex")
    squeeze = v.ndim == 1
    V = np.atleast_2d(v)
    n = V.shape[-1]
    u = -np.sort(-V, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ks = np.arange(1, n + 1)
    cond = u - css / ks > 0
    # cond is True on a prefix; rho is its length
    rho = cond.sum(axis=-1)
    theta = css[np.arange(V.shape[0]), rho - 1] / rho
    out = np.maximum(V - theta[:, None], 0.0)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# potentials
# --------------------------------------------------------------------------

class Potential:
    """Base class: ``value_grad(p) -> (value, grad)`` plus a Lipschitz bound."""

    kind: str
    n: int

    def _check(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.n:
            raise InvalidInput(f"state has dimension {p.shape[-1]}, potential expects {self.n}")
        return p

    def value(self, p):
        return self.value_grad(p)[0]

    def value_grad(self, p):
        raise NotImplementedError

    def lipschitz(self, region_radius: float | None = None) -> float:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class MLL(Potential):
    """V(eta) = 1 - eta_y."""

    label: int
    n: int
    kind = "mll"

    def value_grad(self, p):
        p = self._check(p)
        grad = np.zeros_like(p)
        grad[..., self.label] = -1.0
        return 1.0 - p[..., self.label], grad

    def lipschitz(self, region_radius=None):
        return 1.0

    def default_band(self) -> "LevelBand":
        # V_hi at the uniform start, V_lo where eta_y = 1/2 guarantees the argmax
        return LevelBand(v_lo=0.5, v_hi=1.0 - 1.0 / self.n)

    def to_dict(self):
        return {"kind": "mll", "label": int(self.label)}


@dataclass(frozen=True)
class Margin(Potential):
    """V(eta) = 1 - (eta_y - max_{i != y} eta_i); its 1-level set is the decision boundary."""

    label: int
    n: int
    kind = "margin"

    def runner_up(self, p):
        """Index of max_{i != y} eta_i, smallest index among ties within TIE_TOL."""
        p = np.asarray(p, dtype=float)
        others = p.copy()
        others[..., self.label] = -np.inf
        top = others.max(axis=-1, keepdims=True)
        return np.argmax(others >= top - TIE_TOL, axis=-1)

    def value_grad(self, p):
        p = self._check(p)
        m = self.runner_up(p)
        pm = np.take_along_axis(p, np.expand_dims(m, -1), axis=-1)[..., 0]
        value = 1.0 - (p[..., self.label] - pm)
        grad = np.zeros_like(p)
        grad[..., self.label] = -1.0
        np.put_along_axis(grad, np.expand_dims(m, -1), 1.0, axis=-1)
        return value, grad

    def lipschitz(self, region_radius=None):
        return float(np.sqrt(2.0))

    def default_band(self) -> "LevelBand":
        return LevelBand(v_lo=1.0, v_hi=1.0)

    def to_dict(self):
        return {"kind": "margin", "label": int(self.label)}


class Quadratic(Potential):
    """V(x) = x^T P x with P symmetric positive definite."""

    kind = "quadratic"

    def __init__(self, P):
        P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InvalidInput("P must be a square matrix")
        if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
            raise InvalidInput("P must be symmetric")
        P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P).min() <= 0:
            raise InvalidInput("P must be positive definite")
        self.P = P
        self.n = P.shape[0]

    def value_grad(self, p):
        p = self._check(p)
        Px = p @ self.P
        return np.einsum("...i,...i->...", p, Px), 2.0 * Px

    def lipschitz(self, region_radius=None):
        if region_radius is None or region_radius <= 0:
            raise InvalidInput("quadratic Lipschitz bound needs a positive region radius")
        return 2.0 * float(np.linalg.norm(self.P, 2)) * float(region_radius)

    def to_dict(self):
        return {"kind": "quadratic", "P": [float(v) for v in self.P.ravel()]}

    def __repr__(self):
        return f"Quadratic(P={self.P.tolist()})"


def potential_eval_grad(V: Potential, p):
    return V.value_grad(p)


def potential_lipschitz(V: Potential, region_radius: float | None = None) -> float:
    return V.lipschitz(region_radius)


def potential_from_dict(d: dict, n: int | None = None) -> Potential:
    kind = d.get("kind")
    if kind in ("mll", "margin"):
        if n is None:
            raise InvalidInput("label potentials need the state dimension")
        cls = MLL if kind == "mll" else Margin
        return cls(label=int(d["label"]), n=int(n))
    if kind == "quadratic":
        P = np.asarray(d["P"], dtype=float)
        k = int(round(np.sqrt(P.size)))
        if k * k != P.size:
            raise InvalidInput("quadratic P is not square")
        return Quadratic(P.reshape(k, k))
    raise InvalidInput(f"unknown potential kind {kind!r}")


@dataclass(frozen=True)
class LevelBand:
    v_lo: float
    v_hi: float

    def __post_init__(self):
        if not self.v_lo <= self.v_hi:
            raise InvalidInput(f"band requires v_lo <= v_hi, got {self.v_lo} > {self.v_hi}")

    @property
    def collapsed(self) -> bool:
        return self.v_lo == self.v_hi

    def contains(self, values):
        values = np.asarray(values)
        return (values >= self.v_lo) & (values <= self.v_hi)
