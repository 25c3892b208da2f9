"""Robust Lyapunov training for classifiers and Lyapunov/imitation training for controllers.

Losses return the mean hinge and parameter gradients computed by hand:
potential gradient, then the QP's vector-Jacobian product on its free set,
then the network's backward pass. Samples whose QP solution sits within
``DEGENERACY_TOL`` of a bound are skipped and counted.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .cbf_qp import ClassK, free_mask, solve_batch, vjp_fhat
from .control import input_gain, segway_derivative
from .errors import InvalidInput, NumericalFailure
from .network import ControllerNet, flat_grads, sgd_step
from .simplex import MLL, TIE_TOL, LevelBand, Margin, Potential, project_to_simplex

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration and scheduling
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.05
    iterations: int = 400
    batch_size: int = 32          # data points per iteration
    state_batch: int = 8          # simplex states per data point
    eps: float = 0.05
    kappa_policy: str = "adaptive"
    kappa: float = 0.1            # used when kappa_policy == "fixed"
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and self.batch_size > 0 and self.state_batch > 0):
            raise InvalidInput("learning rate and batch sizes must be positive")
        if self.iterations < 0 or self.eps < 0:
            raise InvalidInput("iterations and eps must be non-negative")
        if self.kappa_policy not in ("adaptive", "fixed"):
            raise InvalidInput(f"unknown kappa policy {self.kappa_policy!r}")
        if self.kappa_policy == "fixed" and not self.kappa > 0:
            raise InvalidInput("fixed kappa must be positive")


@dataclass(frozen=True)
class SampleSpec:
    uniform_weight: float
    band_weight: float
    band: LevelBand
    noise_radius: float


@dataclass
class SamplingScheduler:
    """Mixture of uniform simplex states and states near the certification band.

    The band weight ramps linearly from 0 to ``final_weight`` over the first
    ``ramp`` fraction of training, then stays there.
    """

    iterations: int
    final_weight: float = 0.8
    ramp: float = 0.5
    noise_radius: float = 0.05
    band: LevelBand | None = None

    def __post_init__(self):
        if not 0.0 <= self.final_weight <= 1.0:
            raise InvalidInput("mixture weight must lie in [0, 1]")
        if not 0.0 < self.ramp <= 1.0:
            raise InvalidInput("ramp fraction must lie in (0, 1]")

    def advance(self, iteration) -> SampleSpec:
        if iteration < 0 or iteration > max(self.iterations, 0):
            raise InvalidInput(f"iteration {iteration} outside [0, {self.iterations}]")
        span = self.ramp * max(self.iterations - 1, 1)
        w = self.final_weight * min(1.0, iteration / span)
        return SampleSpec(1.0 - w, w, self.band, self.noise_radius)


def scheduler_advance(scheduler: SamplingScheduler, iteration):
    return scheduler.advance(iteration)


def uniform_simplex(rng, count, n):
    """Dirichlet(1, ..., 1) draws."""
    return rng.dirichlet(np.ones(n), size=count)


def band_states(rng, labels, n, kind, band: LevelBand | None, noise):
    """States near the level band of each sample's label potential."""
    labels = np.asarray(labels)
    m = labels.size
    rows = np.arange(m)
    if kind == "margin":
        E = uniform_simplex(rng, m, n)
        others = E.copy()
        others[rows, labels] = -np.inf
        E[rows, labels] = others.max(axis=1)
        E /= E.sum(axis=1, keepdims=True)
    elif kind == "mll":
        band = band or LevelBand(0.5, 1.0 - 1.0 / n)
        ey = 1.0 - rng.uniform(band.v_lo, band.v_hi, size=m)
        rest = uniform_simplex(rng, m, n - 1) * (1.0 - ey)[:, None]
        E = np.empty((m, n))
        E[rows, labels] = ey
        mask = np.ones((m, n), dtype=bool)
        mask[rows, labels] = False
        E[mask] = rest.ravel()
    else:
        raise InvalidInput(f"no band sampler for potential {kind!r}")
    if noise > 0:
        E = project_to_simplex(E + rng.uniform(-noise, noise, size=E.shape))
    return E


def draw_states(rng, spec: SampleSpec, labels, n, kind):
    """One state per label entry, mixing uniform and band draws by ``spec``'s weights."""
    labels = np.asarray(labels)
    use_band = rng.random(labels.size) < spec.band_weight
    E = uniform_simplex(rng, labels.size, n)
    if use_band.any():
        E[use_band] = band_states(rng, labels[use_band], n, kind, spec.band, spec.noise_radius)
    return E


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    grads: list
    skipped: int = 0
    active: int = 0


def label_potential(kind, labels, E):
    """Values and (sub)gradients of the per-sample label potential."""
    E = np.atleast_2d(E)
    labels = np.broadcast_to(np.asarray(labels), E.shape[:1])
    rows = np.arange(E.shape[0])
    grad = np.zeros_like(E)
    grad[rows, labels] = -1.0
    if kind == "mll":
        return 1.0 - E[rows, labels], grad
    if kind == "margin":
        others = E.copy()
        others[rows, labels] = -np.inf
        top = others.max(axis=1, keepdims=True)
        m = np.argmax(others >= top - TIE_TOL, axis=1)
        grad[rows, m] = 1.0
        return 1.0 - (E[rows, labels] - E[rows, m]), grad
    raise InvalidInput(f"unknown label potential {kind!r}")


def _potential(V, E, labels):
    if isinstance(V, str):
        return label_potential(V, labels, E)
    if isinstance(V, (MLL, Margin)) and labels is not None:
        return label_potential(V.kind, labels, E)
    return V.value_grad(E)


def _filtered(model, E, X):
    fhat = model.net.forward(E, X)
    lower = -model.alpha(E)
    f, lam = solve_batch(fhat, lower)
    free, degenerate = free_mask(fhat, f, lam, lower)
    return f, free, degenerate


def _hinge_grads(model, E, X, cot_f, weights, free, keep):
    """Parameter gradient of ``sum_j weights_j * cot_f_j . f_j`` over kept rows."""
    cot = vjp_fhat(free, cot_f) * (weights * keep)[:, None]
    grads, _, _ = model.net.backward(E, X, cot)
    return grads


def lyapunov_loss(model, V, kappa, states, x, y=None) -> LossResult:
    """Mean of ``max(0, dV/deta . f + kappa V)`` over non-degenerate rows.

    ``V`` is a potential, or ``"mll"``/``"margin"`` together with per-row
    labels ``y``. ``kappa`` is treated as a constant.
    """
    E = np.atleast_2d(np.asarray(states, dtype=float))
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[0] == 1 and E.shape[0] > 1:
        X = np.repeat(X, E.shape[0], axis=0)
    v, g = _potential(V, E, y)
    f, free, degenerate = _filtered(model, E, X)
    psi = np.einsum("bi,bi->b", g, f) + kappa * v
    keep = ~degenerate
    count = int(keep.sum())
    active = (psi > 0) & keep
    if count == 0:
        zeros = [{k: np.zeros_like(a) for k, a in p.items()} for p in model.net.parameters()]
        return LossResult(0.0, zeros, int(degenerate.sum()), 0)
    loss = float(np.where(active, psi, 0.0).sum() / count)
    grads = _hinge_grads(model, E, X, g, active / count, free, keep)
    return LossResult(loss, grads, int(degenerate.sum()), int(active.sum()))


def barrier_loss(model, h: Potential, alpha: ClassK, states, x) -> LossResult:
    """Mean of ``max(0, -dh/deta . f - alpha(h(eta)))`` over non-degenerate rows."""
    E = np.atleast_2d(np.asarray(states, dtype=float))
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[0] == 1 and E.shape[0] > 1:
        X = np.repeat(X, E.shape[0], axis=0)
    hv, hg = h.value_grad(E)
    f, free, degenerate = _filtered(model, E, X)
    psi = -np.einsum("bi,bi->b", hg, f) - alpha(hv)
    keep = ~degenerate
    count = int(keep.sum())
    active = (psi > 0) & keep
    if count == 0:
        zeros = [{k: np.zeros_like(a) for k, a in p.items()} for p in model.net.parameters()]
        return LossResult(0.0, zeros, int(degenerate.sum()), 0)
    loss = float(np.where(active, psi, 0.0).sum() / count)
    grads = _hinge_grads(model, E, X, -hg, active / count, free, keep)
    return LossResult(loss, grads, int(degenerate.sum()), int(active.sum()))


# --------------------------------------------------------------------------
# classifier training
# --------------------------------------------------------------------------

def toy_dataset(seed=0, count=300, sigma=0.3, classes=3, radius=1.0):
    """Gaussian blobs with means evenly spaced on a circle; labels cycle 0..classes-1."""
    rng = np.random.default_rng(seed)
    y = np.arange(count) % classes
    ang = 2 * np.pi * y / classes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    X = means + sigma * rng.standard_normal((count, 2))
    return X, y


def adaptive_kappa(model, eps, kind):
    """Smallest decay rate allowed by the robustness condition at the current weights."""
    pot = Margin(0, model.n) if kind == "margin" else MLL(0, model.n)
    band = pot.default_band()
    return eps * pot.lipschitz() * model.net.lipschitz("input_x") / band.v_lo


def evaluation_states(model, X, y, seed=12345, per_point=8):
    """Fixed (states, inputs, labels) batch for before/after loss comparisons."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(y, per_point)
    E = uniform_simplex(rng, labels.size, model.n)
    half = labels.size // 2
    E[:half] = band_states(rng, labels[:half], model.n, model.potential, None, 0.05)
    return E, np.repeat(X, per_point, axis=0), labels


def train_classifier(model, dataset, cfg: TrainConfig, scheduler: SamplingScheduler | None = None,
                     history_path=None):
    """Plain gradient descent on the Lyapunov loss; returns ``(model, history)``.

    ``history`` rows are dicts with ``iter, loss, kappa, lipschitz_x``.
    """
    X, y = (np.asarray(a) for a in dataset)
    if X.ndim != 2 or X.shape[1] != model.x_dim or y.shape != (X.shape[0],):
        raise InvalidInput("dataset shapes do not match the model")
    if np.any((y < 0) | (y >= model.n)):
        raise InvalidInput("labels out of range")
    rng = np.random.default_rng(cfg.seed)
    scheduler = scheduler or SamplingScheduler(cfg.iterations)
    history = []
    for it in range(cfg.iterations):
        idx = rng.choice(X.shape[0], size=min(cfg.batch_size, X.shape[0]), replace=False)
        labels = np.repeat(y[idx], cfg.state_batch)
        xs = np.repeat(X[idx], cfg.state_batch, axis=0)
        spec = scheduler.advance(it)
        E = draw_states(rng, spec, labels, model.n, model.potential)
        lip = model.net.lipschitz("input_x")
        if cfg.kappa_policy == "adaptive":
            kappa = adaptive_kappa(model, cfg.eps, model.potential)
        else:
            kappa = cfg.kappa
        res = lyapunov_loss(model, model.potential, kappa, E, xs, labels)
        if not math.isfinite(res.loss) or not np.all(np.isfinite(flat_grads(res.grads))):
            raise NumericalFailure(f"non-finite loss or gradient at iteration {it}")
        sgd_step(model.net, res.grads, cfg.lr)
        model.kappa = kappa
        history.append({"iter": it, "loss": res.loss, "kappa": kappa, "lipschitz_x": lip})
    if cfg.iterations and cfg.kappa_policy == "adaptive":
        model.kappa = adaptive_kappa(model, cfg.eps, model.potential)
    if history_path is not None:
        write_history(history_path, history)
    return model, history


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "kappa", "lipschitz_x"])
        for row in history:
            w.writerow([row["iter"], repr(row["loss"]), repr(row["kappa"]), repr(row["lipschitz_x"])])


# --------------------------------------------------------------------------
# controller training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Plant:
    """Control-affine plant ``x' = dynamics(x, u)`` with ``input_gain(x) = d x'/d u``."""

    dynamics: object
    input_gain: object
    dim: int


SEGWAY = Plant(segway_derivative, input_gain, 3)


def stable_plant(dim=3):
    """``x' = -x`` regardless of the input."""
    return Plant(lambda X, u: -np.asarray(X, dtype=float), lambda X: np.zeros_like(np.asarray(X, dtype=float)), dim)


@dataclass
class ControllerTrainConfig:
    imitation_iterations: int = 2000
    imitation_lr: float = 0.02
    lyapunov_iterations: int = 300
    lyapunov_lr: float = 0.002
    p_lr: float = 0.0005
    batch: int = 256
    level: float = 0.05
    band_halfwidth: float = 0.5   # relative: states with V in level * [1 - w, 1 + w]
    kappa: float = 0.5
    adversarial_steps: int = 10
    grid_spacing: float = 0.005   # r; adversarial step is r / 5
    adversarial_fraction: float = 0.5
    domain: tuple = field(default=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))
    seed: int = 0


P_FLOOR = 1e-3


def p_from_factor(L):
    L = np.tril(L)
    return L.T @ L + P_FLOOR * np.eye(L.shape[0])


def factor_from_p(P):
    """Lower-triangular ``L`` with ``L^T L = P - P_FLOOR I``."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    J = np.eye(n)[::-1]
    C = np.linalg.cholesky(J @ (P - P_FLOOR * np.eye(n)) @ J)
    return J @ C.T @ J


def imitation_loss(controller, X, reference_u):
    """Mean squared error to the reference torques, with parameter gradients."""
    u = controller.forward(X)[:, 0]
    err = u - reference_u
    grads, _ = controller.backward(X, (2.0 / X.shape[0]) * err[:, None])
    return float(np.mean(err**2)), grads


def controller_hinge(plant: Plant, controller, P, kappa, X):
    """Per-row ``dV/dt + kappa V`` for ``V = x^T P x`` with the current controller."""
    u = controller.forward(X)[:, 0]
    F = plant.dynamics(X, u)
    PX = X @ P
    return 2.0 * np.einsum("bi,bi->b", PX, F) + kappa * np.einsum("bi,bi->b", X, PX), F


def controller_lyapunov_loss(plant: Plant, controller, P, kappa, X):
    """Mean hinge with gradients for the controller parameters and for ``P``."""
    X = np.atleast_2d(X)
    psi, F = controller_hinge(plant, controller, P, kappa, X)
    active = psi > 0
    B = X.shape[0]
    loss = float(np.where(active, psi, 0.0).sum() / B)
    w = active / B
    du = 2.0 * np.einsum("bi,bi->b", X @ P, plant.input_gain(X)) * w
    grads, _ = controller.backward(X, du[:, None])
    Xa = X * w[:, None]
    G = Xa.T @ F + F.T @ Xa + kappa * Xa.T @ X
    return loss, grads, G


def sample_level_band(rng, P, level, halfwidth, count, domain):
    """States with ``V`` uniform-ish in ``level * [1 - w, 1 + w]`` inside the domain box."""
    lo, hi = (np.asarray(a, dtype=float) for a in domain)
    n = P.shape[0]
    R = np.linalg.cholesky(P)
    out = []
    while sum(len(o) for o in out) < count:
        u = rng.standard_normal((count, n))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        scale = np.sqrt(level * rng.uniform(1 - halfwidth, 1 + halfwidth, size=count))
        X = np.linalg.solve(R.T, (u * scale[:, None]).T).T
        out.append(X[np.all((X >= lo) & (X <= hi), axis=1)])
    return np.concatenate(out)[:count]


def adversarial_states(plant, controller, P, kappa, seeds, steps, step, radius, domain):
    """Projected sign-gradient ascent on the hinge, central differences for the state gradient."""
    lo, hi = (np.asarray(a, dtype=float) for a in domain)
    X = seeds.copy()
    n = X.shape[1]
    h = 1e-6
    for _ in range(steps):
        g = np.empty_like(X)
        for i in range(n):
            e = np.zeros(n)
            e[i] = h
            g[:, i] = (controller_hinge(plant, controller, P, kappa, X + e)[0]
                       - controller_hinge(plant, controller, P, kappa, X - e)[0]) / (2 * h)
        X = X + step * np.sign(g)
        X = np.clip(X, seeds - radius, seeds + radius)
        X = np.clip(X, lo, hi)
    return X


def train_controller(controller: ControllerNet, plant: Plant, P_init, reference_K, cfg: ControllerTrainConfig,
                     history=None):
    """Stage 1: imitate ``u = -K x``. Stage 2: Lyapunov hinge on band + adversarial states,
    learning ``P = L^T L + 1e-3 I`` with its trace held fixed. Returns ``(controller, P)``."""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = (np.asarray(a, dtype=float) for a in cfg.domain)
    K = np.atleast_2d(np.asarray(reference_K, dtype=float))
    history = history if history is not None else []
    for it in range(cfg.imitation_iterations):
        X = rng.uniform(lo, hi, size=(cfg.batch, plant.dim))
        loss, grads = imitation_loss(controller, X, -(X @ K.T)[:, 0])
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite imitation loss at iteration {it}")
        sgd_step(controller, grads, cfg.imitation_lr)
        history.append({"stage": 1, "iter": it, "loss": loss})

    L = factor_from_p(P_init)
    trace = float(np.trace(p_from_factor(L)))
    r = cfg.grid_spacing
    for it in range(cfg.lyapunov_iterations):
        P = p_from_factor(L)
        X = sample_level_band(rng, P, cfg.level, cfg.band_halfwidth, cfg.batch, cfg.domain)
        n_adv = int(cfg.adversarial_fraction * cfg.batch)
        if n_adv and cfg.adversarial_steps:
            X[:n_adv] = adversarial_states(plant, controller, P, cfg.kappa, X[:n_adv],
                                           cfg.adversarial_steps, r / 5, r, cfg.domain)
        loss, grads, G = controller_lyapunov_loss(plant, controller, P, cfg.kappa, X)
        if not math.isfinite(loss):
            raise NumericalFailure(f"non-finite Lyapunov loss at iteration {it}")
        history.append({"stage": 2, "iter": it, "loss": loss})
        if loss == 0.0:
            continue
        sgd_step(controller, grads, cfg.lyapunov_lr)
        L = np.tril(L - cfg.p_lr * 2.0 * L @ G)
        # hold the trace fixed so the hinge cannot shrink by scaling P
        excess = trace - P_FLOOR * plant.dim
        L *= math.sqrt(excess / max(float(np.sum(L * L)), 1e-300))
    return controller, p_from_factor(L)
