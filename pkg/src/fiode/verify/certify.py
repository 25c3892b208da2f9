"""Certificates: robust classification on the simplex and sublevel-set invariance for controllers."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import EmptyBand, InvalidInput
from ..sampling import (BoundarySampleSet, SimplexGrid, box_grid, rejection_filter,
                        sample_decision_boundary, sample_simplex_grid)
from ..simplex import MLL, LevelBand, Margin, Quadratic, uniform_point
from .bounds import IntervalBox, crown_dense_bounds, qp_interval_bounds
from .expr import mean_value_upper

DELTA = 1e-6
CHUNK = 2048


@dataclass
class CertificationReport:
    verdict: str
    reason: str | None = None
    samples: int = 0
    violations: list = field(default_factory=list)
    elapsed_s: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.verdict == "Certified"

    def to_dict(self, include_time=True):
        d = {"verdict": self.verdict, "reason": self.reason, "samples": int(self.samples),
             "violations": self.violations, "elapsed_s": self.elapsed_s, "details": self.details}
        if not include_time:
            d.pop("elapsed_s")
        return d

    def to_json(self, include_time=True) -> str:
        return json.dumps(self.to_dict(include_time), sort_keys=True, indent=2)


def kappa_min(eps, lip_v, lip_fx, v_lo):
    """Smallest decay rate for which an eps-perturbation cannot push V past v_lo."""
    return eps * lip_v * lip_fx / v_lo


def min_horizon(kappa, v_lo, v0, eps, lip_v, lip_fx):
    """Integration time after which the comparison-lemma envelope is below v_lo."""
    c = eps * lip_v * lip_fx / kappa
    if v0 <= v_lo:
        return 0.0
    if v_lo - c <= 0:
        return math.inf
    return -math.log((v_lo - c) / (v0 - c)) / kappa


def comparison_envelope(t, v0, kappa, eps=0.0, lip_v=1.0, lip_fx=1.0):
    """V(0) e^{-kappa t} + (L_V L_f^x eps / kappa)(1 - e^{-kappa t})."""
    decay = np.exp(-kappa * np.asarray(t, dtype=float))
    return v0 * decay + eps * lip_v * lip_fx / kappa * (1.0 - decay)


def _run_chunks(fn, n_items, threads, chunk=CHUNK):
    """Evaluate ``fn(start, stop)`` over chunks; concatenation order is fixed by chunk index."""
    spans = [(i, min(i + chunk, n_items)) for i in range(0, n_items, chunk)]
    if threads is None or threads <= 1 or len(spans) <= 1:
        parts = [fn(a, b) for a, b in spans]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda s: fn(*s), spans))
    return np.concatenate(parts) if parts else np.zeros(0)


def _violations(bounds, delta, lower, upper, limit=20):
    bad = np.flatnonzero(bounds > -delta)
    return [
        {"index": int(i), "box_lower": [float(v) for v in lower[i]],
         "box_upper": [float(v) for v in upper[i]], "bound": float(bounds[i])}
        for i in bad[:limit]
    ], bad


# --------------------------------------------------------------------------
# classifier
# --------------------------------------------------------------------------

def fhat_box(model, x, eta_box: IntervalBox, mode="crown"):
    """Enclosure of the raw dynamics over a batch of state boxes at a fixed input ``x``.

    ``lipschitz`` mode: value at the box centre plus the state-path Lipschitz
    constant times the box's l2 half-diagonal. ``crown`` mode intersects the
    linear-relaxation box with that, so it is never looser.
    """
    net = model.net
    c = eta_box.center
    rad = np.linalg.norm(eta_box.radius, axis=-1, keepdims=True)
    L = net.lipschitz("state_eta")
    f0 = net.forward(c, np.asarray(x)[None, :].repeat(c.shape[0], axis=0))
    spread = L * rad * (1 + 1e-12) + 1e-12 * (1.0 + np.abs(f0))
    lip = IntervalBox(f0 - spread, f0 + spread)
    if mode == "lipschitz":
        return lip
    if mode != "crown":
        raise InvalidInput(f"unknown bound mode {mode!r}")
    _, cb = crown_dense_bounds(net.eta_chain(x), eta_box)
    return IntervalBox(np.maximum(cb.lower, lip.lower), np.minimum(cb.upper, lip.upper))


def classifier_box_bounds(model, x, y, V, band: LevelBand, centers, radius, kappa, mode="crown"):
    """Upper bounds on ``dV/deta . f + kappa V`` over l-inf boxes around ``centers``.

    For the margin potential the bound is taken over every index that can be
    the runner-up somewhere on the box, so no subgradient choice is involved.
    """
    centers = np.atleast_2d(centers)
    el = np.clip(centers - radius, 0.0, 1.0)
    eu = np.clip(centers + radius, 0.0, 1.0)
    ebox = IntervalBox(el, eu)
    fb = qp_interval_bounds(ebox, fhat_box(model, x, ebox, mode), model.alpha)
    fl, fu = np.atleast_2d(fb.lower), np.atleast_2d(fb.upper)
    n = centers.shape[1]
    if isinstance(V, Margin):
        others = np.ones(n, dtype=bool)
        others[y] = False
        best_lo = np.where(others, el, -np.inf).max(axis=1, keepdims=True)
        cand = others & (eu >= best_lo) & (eu >= el[:, [y]]) & (el <= eu[:, [y]])
        # on the decision boundary V equals its lower level
        per = fu - fl[:, [y]] + kappa * band.v_lo
        return np.where(cand, per, -np.inf).max(axis=1)
    if isinstance(V, MLL):
        v_hi = np.minimum(1.0 - el[:, y], band.v_hi)
        return -fl[:, y] + kappa * v_hi
    raise InvalidInput("classifier certification supports the MLL and margin potentials")


def classifier_samples(V, band: LevelBand, n, y, density):
    """Covering centres for the certified region: boundary lattice (margin) or
    simplex lattice points whose box can meet the band (MLL)."""
    if isinstance(V, Margin):
        return sample_decision_boundary(n, density, y)
    grid = sample_simplex_grid(n, density)
    pts = grid.points
    r = 1.0 / density
    v_lo_box = 1.0 - np.minimum(pts[:, y] + r, 1.0)
    v_hi_box = 1.0 - np.maximum(pts[:, y] - r, 0.0)
    keep = (v_hi_box >= band.v_lo) & (v_lo_box <= band.v_hi)
    return SimplexGrid(n=n, density=density, counts=grid.counts[keep])


def certify_classifier(model, x, y, eps, V=None, band=None, samples=None, neighborhood_radius=None,
                       density=20, mode="crown", delta=DELTA, horizon=None, threads=1):
    """Check the three robust-classification conditions for input ``x`` with label ``y``.

    Conditions, in order: decay rate large enough for the input Lipschitz
    constant, integration horizon long enough, and the decrease condition on
    every sample box with strict margin ``delta``.
    """
    t0 = time.perf_counter()
    n = model.n
    x = np.asarray(x, dtype=float)
    V = V if V is not None else Margin(label=y, n=n)
    if getattr(V, "label", y) != y:
        raise InvalidInput("potential label disagrees with y")
    band = band if band is not None else V.default_band()
    if samples is None:
        samples = classifier_samples(V, band, n, y, density)
    if isinstance(samples, (SimplexGrid, BoundarySampleSet)):
        dens = samples.density
        centers = samples.points
    else:
        dens = None
        centers = np.atleast_2d(np.asarray(samples, dtype=float))
    if neighborhood_radius is None:
        if dens is None:
            raise InvalidInput("raw sample arrays need an explicit neighborhood_radius")
        neighborhood_radius = 1.0 / dens
    if dens is not None and neighborhood_radius < 1.0 / dens:
        raise InvalidInput(f"neighborhood radius {neighborhood_radius} does not cover density {dens}")
    if isinstance(samples, BoundarySampleSet) and not isinstance(V, Margin):
        raise InvalidInput("boundary samples only cover the margin potential's level set")

    kappa = float(model.kappa)
    lip_v = V.lipschitz()
    lip_fx = model.net.lipschitz("input_x")
    k_min = kappa_min(eps, lip_v, lip_fx, band.v_lo)
    v0 = float(V.value(uniform_point(n)))
    T = float(horizon if horizon is not None else model.integrator.horizon)
    details = {"kappa": kappa, "kappa_min": k_min, "lipschitz_v": lip_v, "lipschitz_x": lip_fx,
               "eps": float(eps), "v_lo": band.v_lo, "v_hi": band.v_hi, "v0": v0, "horizon": T,
               "delta": delta, "mode": mode, "neighborhood_radius": float(neighborhood_radius)}

    def done(verdict, reason=None, violations=(), count=0):
        return CertificationReport(verdict, reason, count, list(violations),
                                   time.perf_counter() - t0, details)

    if kappa < k_min * (1 - 1e-12):
        return done("Failed", "InsufficientKappa")
    t_min = min_horizon(kappa, band.v_lo, v0, eps, lip_v, lip_fx)
    details["t_min"] = t_min
    if T < t_min:
        return done("Failed", "InsufficientTime")

    def chunk(a, b):
        return classifier_box_bounds(model, x, y, V, band, centers[a:b], neighborhood_radius, kappa, mode)

    bounds = _run_chunks(chunk, centers.shape[0], threads)
    lo = np.clip(centers - neighborhood_radius, 0, 1)
    hi = np.clip(centers + neighborhood_radius, 0, 1)
    viol, bad = _violations(bounds, delta, lo, hi)
    details["max_bound"] = float(bounds.max()) if bounds.size else None
    if bad.size:
        details["violated_count"] = int(bad.size)
        return done("Failed", "ViolatedBox", viol, centers.shape[0])
    return done("Certified", None, (), centers.shape[0])


# --------------------------------------------------------------------------
# invariant sublevel set of a closed loop
# --------------------------------------------------------------------------

def level_set_halfwidths(P, c):
    """Half-widths of the axis-aligned bounding box of {x : x^T P x <= c}."""
    return np.sqrt(c * np.diag(np.linalg.inv(P)))


def level_band_points(V: Quadratic, c, domain, r):
    """Rejection-filtered grid points around the level set ``V = c``.

    The lattice is anchored at the domain's lower corner; only the part that
    can hold band points (the bounding box of the outer band level) is built.
    """
    lo_d, hi_d = (np.asarray(a, dtype=float) for a in domain)
    n = lo_d.size
    half = level_set_halfwidths(V.P, c)
    if np.any(-half < lo_d) or np.any(half > hi_d):
        raise InvalidInput(f"level set V={c} is not inside the domain box")
    # ||grad V|| = 2||P x|| <= 2 sqrt(lam_max V); written as 2 sigma_max R for an
    # effective radius R covering the level set plus half a cell diagonal
    region = math.sqrt(c / np.linalg.eigvalsh(V.P).max()) + math.sqrt(n) * r / 2
    L = V.lipschitz(region)
    c_hi = c + L * math.sqrt(n) / 2 * r
    outer = level_set_halfwidths(V.P, c_hi) + r
    sub_lo = np.maximum(lo_d, -outer)
    sub_hi = np.minimum(hi_d, outer)
    # snap the sub-box onto the domain lattice
    k_lo = np.floor((sub_lo - lo_d) / r)
    k_hi = np.ceil((sub_hi - lo_d) / r)
    start = lo_d + k_lo * r
    stop = np.minimum(lo_d + k_hi * r, hi_d + r)
    grid = box_grid(start, stop, r)
    return rejection_filter(grid, r, V, c, region_radius=region)


def certify_invariant_set(loop, V: Quadratic, level, domain=None, r=0.02, delta=DELTA, threads=1):
    """Certify that {V <= level} is forward invariant for ``loop`` by bounding dV/dt < 0
    on l-inf boxes of half-width r/2 around rejection-sampled level-set points."""
    t0 = time.perf_counter()
    if domain is None:
        domain = (np.full(V.n, -1.0), np.full(V.n, 1.0))
    details = {"level": float(level), "grid_spacing": float(r), "delta": delta}
    pts, band = level_band_points(V, level, domain, r)
    details.update({"c_lo": float(band.c_lo), "c_hi": float(band.c_hi)})
    vdot = loop.vdot_expr(V.P)
    half = r / 2

    def chunk(a, b):
        box = IntervalBox(pts[a:b] - half, pts[a:b] + half)
        return mean_value_upper(vdot, box)

    bounds = _run_chunks(chunk, pts.shape[0], threads)
    viol, bad = _violations(bounds, delta, pts - half, pts + half)
    details["max_bound"] = float(bounds.max())
    elapsed = time.perf_counter() - t0
    if bad.size:
        details["violated_count"] = int(bad.size)
        return CertificationReport("Failed", "ViolatedBox", pts.shape[0], viol, elapsed, details)
    return CertificationReport("Certified", None, pts.shape[0], [], elapsed, details)


def max_level_in_domain(P, domain, shrink=0.999):
    """Largest ``c`` whose sublevel set fits the domain box (scaled by ``shrink``)."""
    lo, hi = (np.asarray(a, dtype=float) for a in domain)
    reach = np.minimum(-lo, hi) ** 2 / np.diag(np.linalg.inv(P))
    return shrink * float(reach.min())


def search_level(loop, V: Quadratic, domain=None, r=0.005, ratio=0.7, tries=8, delta=DELTA, threads=1):
    """Try levels ``c_max * ratio**k`` from the top down; returns ``(level, report)`` for the
    first certified one, or ``(None, last_report)``."""
    if domain is None:
        domain = (np.full(V.n, -1.0), np.full(V.n, 1.0))
    c = max_level_in_domain(V.P, domain)
    report = None
    for _ in range(tries):
        try:
            report = certify_invariant_set(loop, V, c, domain, r, delta, threads)
        except EmptyBand:
            report = None
        if report is not None and report.certified:
            return c, report
        c *= ratio
    return None, report
