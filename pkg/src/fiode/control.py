"""Planar segway benchmark: plant dynamics, closed loop, LQR reference gain.

State ordering is ``(phi, v, phi_dot)``: angular position (rad), velocity
(m/s), angular velocity (rad/s). The input ``u`` is a scalar torque.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .verify import expr as ex

STATE_DIM = 3
DEFAULT_DOMAIN = (np.full(3, -1.0), np.full(3, 1.0))


@dataclass(frozen=True)
class SegwayState:
    phi: float
    v: float
    phi_dot: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.phi, self.v, self.phi_dot])):
            raise InvalidInput("segway state must be finite")

    def as_array(self):
        return np.array([self.phi, self.v, self.phi_dot])


def segway_derivative(s, u):
    """Time derivative of ``(phi, v, phi_dot)`` under torque ``u``; batch-aware."""
    if isinstance(s, SegwayState):
        s = s.as_array()
    s = np.asarray(s)
    phi, v, dphi = s[..., 0], s[..., 1], s[..., 2]
    u = np.asarray(u)
    c, sn = np.cos(phi), np.sin(phi)
    v_dot = (c * (-1.8 * u + 11.5 * v + 9.8 * sn) - 10.9 * u + 68.4 * v - 1.2 * dphi**2 * sn) / (c - 24.7)
    phi_ddot = ((9.3 * u - 58.8 * v) * c + 38.6 * u - 243.5 * v - sn * (208.3 + dphi**2 * c)) / (c**2 - 24.7)
    return np.stack(np.broadcast_arrays(dphi, v_dot, phi_ddot), axis=-1)


def input_gain(s):
    """``d f / d u`` (the plant is affine in ``u``)."""
    s = np.asarray(s)
    c = np.cos(s[..., 0])
    zero = np.zeros_like(c)
    return np.stack([zero, (-1.8 * c - 10.9) / (c - 24.7), (9.3 * c + 38.6) / (c**2 - 24.7)], axis=-1)


def linearize(x0=None, u0=0.0):
    """Jacobians ``(A, B)`` at ``(x0, u0)`` by complex-step differentiation (exact to rounding)."""
    x0 = np.zeros(STATE_DIM) if x0 is None else np.asarray(x0, dtype=float)
    h = 1e-30
    A = np.empty((STATE_DIM, STATE_DIM))
    for j in range(STATE_DIM):
        xp = x0.astype(complex)
        xp[j] += 1j * h
        A[:, j] = segway_derivative(xp, complex(u0)).imag / h
    B = (segway_derivative(x0.astype(complex), u0 + 1j * h).imag / h).reshape(STATE_DIM, 1)
    return A, B


def lqr_gain(A=None, B=None, Q=None, R=None, dt=0.01, iterations=500):
    """Stabilising gain ``K`` (``u = -K x``) from the discrete Riccati recursion on the
    Euler discretisation of the linearised plant."""
    if A is None or B is None:
        A, B = linearize()
    n, m = B.shape
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(m) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    Ad = np.eye(n) + dt * A
    Bd = dt * B
    P = Q.copy()
    for _ in range(iterations):
        K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        P = Q + Ad.T @ P @ (Ad - Bd @ K)
        P = 0.5 * (P + P.T)
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    return K


# --------------------------------------------------------------------------
# expression graphs
# --------------------------------------------------------------------------

def segway_exprs(u: ex.Expr, state=None):
    """The segway vector field as expression nodes, grouped so ``u`` and ``v`` appear once
    per component (algebraically equal to :func:`segway_derivative`)."""
    if state is None:
        state = [ex.var(i) for i in range(STATE_DIM)]
    phi, v, dphi = state
    c, s = ex.cos(phi), ex.sin(phi)
    d1 = c - 24.7
    d2 = c**2 - 24.7
    dphi2 = dphi**2
    v_dot = (u * ((-1.8 * c - 10.9) / d1) + v * ((11.5 * c + 68.4) / d1)
             + (9.8 * s * c) / d1 + dphi2 * ((-1.2 * s) / d1))
    phi_ddot = (u * ((9.3 * c + 38.6) / d2) + v * ((-58.8 * c - 243.5) / d2)
                + (-208.3 * s) / d2 + dphi2 * ((-1.0 * s * c) / d2))
    return [dphi, v_dot, phi_ddot]


class ClosedLoop:
    """A closed-loop vector field with both a direct code path and an expression graph."""

    def __init__(self, exprs, direct=None, controller=None, dim=None):
        self.exprs = list(exprs)
        self.controller = controller
        self.dim = dim if dim is not None else len(self.exprs)
        self._direct = direct

    @classmethod
    def segway(cls, controller):
        if controller.in_dim != STATE_DIM:
            raise InvalidInput("segway controller must take the 3-dimensional state")
        state = [ex.var(i) for i in range(STATE_DIM)]
        u = ex.NetOut(controller, state, 0)
        return cls(segway_exprs(u, state), direct=lambda X: closed_loop_derivative(X, controller),
                   controller=controller)

    @classmethod
    def linear(cls, A):
        """``x' = A x`` (handy for hand-set loops such as ``A = -I``)."""
        A = np.asarray(A, dtype=float)
        xs = [ex.var(i) for i in range(A.shape[1])]
        exprs = []
        for row in A:
            e = ex.Const(0.0)
            for a, x in zip(row, xs):
                if a != 0.0:
                    e = e + a * x
            exprs.append(e)
        return cls(exprs, direct=lambda X: np.asarray(X) @ A.T)

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        if self._direct is not None:
            return self._direct(X)
        return ex.evaluate(self.exprs, X)

    def graph_eval(self, X):
        return ex.evaluate(self.exprs, np.asarray(X, dtype=float))

    def vdot_expr(self, P):
        """``dV/dt = 2 x^T P f(x)`` for ``V = x^T P x``."""
        P = np.asarray(P, dtype=float)
        xs = [ex.var(i) for i in range(self.dim)]
        total = ex.Const(0.0)
        for i in range(self.dim):
            px = ex.Const(0.0)
            for j in range(self.dim):
                if P[i, j] != 0.0:
                    px = px + (2.0 * P[i, j]) * xs[j]
            total = total + px * self.exprs[i]
        return total


def closed_loop_derivative(s, controller):
    s = s.as_array() if isinstance(s, SegwayState) else np.asarray(s, dtype=float)
    S = np.atleast_2d(s)
    u = controller.forward(S)[:, 0]
    out = segway_derivative(S, u)
    return out[0] if s.ndim == 1 else out


def vdot_grid(loop: ClosedLoop, P, phi, phi_dot, v=0.0):
    """``dV/dt`` on a (phi, phi_dot) mesh at fixed ``v``; returns rows ``(phi, phi_dot, vdot)``."""
    PP, DD = np.meshgrid(phi, phi_dot, indexing="ij")
    X = np.stack([PP.ravel(), np.full(PP.size, v), DD.ravel()], axis=1)
    F = loop(X)
    vd = 2.0 * np.einsum("bi,ij,bj->b", X, np.asarray(P), F)
    return np.stack([X[:, 0], X[:, 2], vd], axis=1)


def write_vdot_grid_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi", "phi_dot", "vdot"])
        for r in rows:
            w.writerow([repr(float(x)) for x in r])
