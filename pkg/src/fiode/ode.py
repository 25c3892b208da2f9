"""Fixed-step integration of the filtered dynamics and the classifier read-out."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .cbf_qp import ClassK, solve_batch
from .errors import InvalidInput, NumericalFailure
from .simplex import project_to_simplex, uniform_point


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    dt: float = 0.05
    horizon: float = 5.0

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise InvalidInput(f"unknown integrator {self.method!r}")
        if not (self.dt > 0 and self.horizon > 0):
            raise InvalidInput("dt and horizon must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps) or round(steps) < 1:
            raise InvalidInput("horizon/dt must be a positive integer")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def to_dict(self):
        return {"method": self.method, "dt": self.dt, "horizon": self.horizon}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, ..., n)

    @property
    def final(self):
        return self.states[-1]

    def to_csv(self, path, prefix="eta", index=None):
        """Write ``t,<prefix>_0,...``; for a batch of rollouts pick one with ``index``."""
        states = self.states if index is None else self.states[:, index]
        if states.ndim != 2:
            raise InvalidInput("pick a single trajectory from the batch with index=")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{prefix}_{i}" for i in range(states.shape[1])])
            for t, s in zip(self.times, states):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in s])


def _step(f, y, dt, method):
    if method == "euler":
        return y + dt * f(y)
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def rollout(dynamics, eta0, cfg: IntegratorConfig, simplex: bool = False) -> Trajectory:
    """Integrate ``dy/dt = dynamics(y)`` from ``eta0`` (single state or batch).

    With ``simplex=True`` each step is followed by exact re-projection onto the
    probability simplex.
    """
    y = np.array(eta0, dtype=float)
    states = [y.copy()]
    for _ in range(cfg.steps):
        y = _step(dynamics, y, cfg.dt, cfg.method)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure("non-finite state during rollout")
        if simplex:
            y = project_to_simplex(y)
        states.append(y.copy())
    times = np.arange(cfg.steps + 1) * cfg.dt
    return Trajectory(times=times, states=np.stack(states))


def classify(traj_or_state) -> int | np.ndarray:
    """Argmax of the final simplex state; ``np.argmax`` already breaks ties by lowest index."""
    final = traj_or_state.final if isinstance(traj_or_state, Trajectory) else np.asarray(traj_or_state)
    return np.argmax(final, axis=-1)


class FilteredDynamics:
    """Classifier vector field ``eta -> QP(f_hat(eta, x), lower=-alpha(eta))`` for fixed inputs.

    ``x`` may be a single input or a batch aligned with a batch of states.
    """

    def __init__(self, net, x, alpha: ClassK, b: float = 0.0):
        self.net = net
        self.x = np.asarray(x, dtype=float)
        self.alpha = alpha
        self.b = b

    def __call__(self, eta):
        eta = np.asarray(eta, dtype=float)
        E = np.atleast_2d(eta)
        X = np.atleast_2d(self.x)
        fhat = self.net.forward(E, X)
        f, _ = solve_batch(fhat, -self.alpha(E), None, self.b)
        return f[0] if eta.ndim == 1 else f


def predict(model, x, cfg: IntegratorConfig | None = None):
    """Roll the classifier from the uniform state and return labels (batch-aware)."""
    cfg = cfg or model.integrator
    X = np.atleast_2d(np.asarray(x, dtype=float))
    eta0 = np.tile(uniform_point(model.n), (X.shape[0], 1))
    traj = rollout(FilteredDynamics(model.net, X, model.alpha), eta0, cfg, simplex=True)
    labels = classify(traj)
    return labels[0] if np.asarray(x).ndim == 1 else labels
