"""Deterministic covering samples: simplex lattice, decision boundary, rejection band."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, EmptyBand, InvalidInput
from .simplex import Potential, Quadratic

DEFAULT_BUDGET = 10**8


@dataclass
class SimplexGrid:
    n: int
    density: int
    counts: np.ndarray  # integer compositions, (N, n)

    @property
    def points(self) -> np.ndarray:
        return self.counts / self.density

    def __len__(self):
        return self.counts.shape[0]


@dataclass
class BoundarySampleSet:
    n: int
    density: int
    label: int
    counts: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.counts / self.density

    def __len__(self):
        return self.counts.shape[0]


def compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``, lexicographic."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    # stars and bars: bar positions among total + parts - 1 slots
    for bars in itertools.combinations(range(total + parts - 1), parts - 1):
        edges = (-1,) + bars + (total + parts - 1,)
        rows.append([edges[i + 1] - edges[i] - 1 for i in range(parts)])
    out = np.array(rows, dtype=np.int64)
    return out[np.lexsort(out.T[::-1])]


def sample_simplex_grid(n: int, density: int, budget: int = DEFAULT_BUDGET) -> SimplexGrid:
    if n < 2 or density < 1:
        raise InvalidInput("need n >= 2 and density >= 1")
    count = comb(density + n - 1, n - 1)
    if count > budget:
        raise BudgetExceeded(f"simplex grid would have {count} points (budget {budget})")
    return SimplexGrid(n=n, density=density, counts=compositions(density, n))


# --------------------------------------------------------------------------
# decision boundary by dynamic programming
# --------------------------------------------------------------------------

def _rearrange(a, c, k):
    """Lift a point ``a`` of a smaller boundary problem into ``k`` dims (label at index 0).

    Every entry of ``a`` is raised by one; ``a[0]`` goes to the label slot and
    ``a[1:]`` to the positions listed in ``c`` (increasing, drawn from 1..k-1).
    """
    w = [0] * k
    w[0] = a[0] + 1
    for pos, val in zip(c, a[1:]):
        w[pos] = val + 1
    return tuple(w)


def boundary_count(n: int, density: int) -> int:
    """|S_y| from the same recursion, without materialising the points."""
    cnt = [[0] * (n + 1) for _ in range(density + 1)]
    for k in range(2, n + 1):
        cnt[0][k] = 1
    for j in range(2, density + 1, 2):
        cnt[j][2] = 1
    for j in range(2, density + 1):
        for k in range(3, n + 1):
            for l in range(0, k - 1):
                if j - k + l >= 0:
                    cnt[j][k] += comb(k - 1, k - l - 1) * cnt[j - k + l][k - l]
    return cnt[density][n]


def _boundary_dp(n: int, density: int):
    sol = [[set() for _ in range(n + 1)] for _ in range(density + 1)]
    for k in range(2, n + 1):
        sol[0][k] = {(0,) * k}
    for j in range(2, density + 1, 2):
        sol[j][2] = {(j // 2, j // 2)}  # odd budgets cannot tie two classes
    for j in range(2, density + 1):
        for k in range(3, n + 1):
            for l in range(0, k - 1):
                if j - k + l < 0:
                    continue
                m = k - l  # number of nonzero coordinates, label included
                for c in itertools.combinations(range(1, k), m - 1):
                    for a in sol[j - k + l][m]:
                        sol[j][k].add(_rearrange(a, c, k))
    return sol[density][n]


def sample_decision_boundary(n: int, density: int, label: int, budget: int = DEFAULT_BUDGET) -> BoundarySampleSet:
    """Integer points with ``s_y = max_{i != y} s_i`` and sum ``density``, scaled by 1/density."""
    if n < 2 or density < 2:
        raise InvalidInput("need n >= 2 and density >= 2")
    if density % 2 != 0 or density % n == 1:
        raise InvalidInput("density must be even and not congruent to 1 mod n")
    if not 0 <= label < n:
        raise InvalidInput(f"label {label} out of range for n={n}")
    count = boundary_count(n, density)
    if count > budget:
        raise BudgetExceeded(f"boundary set would have {count} points (budget {budget})")
    if n == 2:
        pts = {(density // 2, density // 2)}
    else:
        pts = _boundary_dp(n, density)
    arr = np.array(sorted(pts), dtype=np.int64).reshape(-1, n)
    # the DP keeps the label in slot 0; move it to slot ``label``
    order = list(range(1, n))
    order.insert(label, 0)
    arr = arr[:, order]
    arr = arr[np.lexsort(arr.T[::-1])]
    return BoundarySampleSet(n=n, density=density, label=label, counts=arr)


def brute_force_boundary(n: int, density: int, label: int) -> np.ndarray:
    """Exhaustive filter of the simplex lattice; the oracle for the DP."""
    c = compositions(density, n)
    others = np.delete(c, label, axis=1)
    return c[c[:, label] == others.max(axis=1)]


# --------------------------------------------------------------------------
# rejection sampling around a level set
# --------------------------------------------------------------------------

@dataclass
class RejectionBand:
    r: float
    c_lo: float
    c_hi: float
    target: float

    def __post_init__(self):
        if not (self.r > 0 and self.c_lo < self.target < self.c_hi):
            raise InvalidInput("rejection band needs r > 0 and c_lo < target < c_hi")


def box_grid(lower, upper, r):
    """Mesh grid with spacing ``r`` covering the box (cell centres on both ends)."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    axes = []
    for lo, hi in zip(lower, upper):
        k = int(np.ceil((hi - lo) / r - 1e-12))
        axes.append(lo + r * np.arange(k + 1))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def rejection_filter(grid, r: float, V: Potential, target: float, region_radius: float | None = None):
    """Keep grid points whose potential lies strictly inside ``target -+ L_V (sqrt(n)/2) r``.

    Returns ``(accepted_points, RejectionBand)``. Every point of the target
    level set inside the gridded box is within ``r/2`` (l-inf) of an accepted
    point. ``region_radius`` bounds ``||x||_2`` over the gridded box for the
    quadratic Lipschitz constant; it defaults to the largest grid norm plus
    the half-cell diagonal.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    n = grid.shape[1]
    if isinstance(V, Quadratic) and region_radius is None:
        region_radius = float(np.linalg.norm(grid, axis=1).max()) + np.sqrt(n) * r / 2
    L = V.lipschitz(region_radius)
    half = L * np.sqrt(n) / 2 * r
    band = RejectionBand(r=r, c_lo=target - half, c_hi=target + half, target=target)
    vals = V.value(grid)
    keep = (vals > band.c_lo) & (vals < band.c_hi)
    if not keep.any():
        raise EmptyBand(f"no grid point within ({band.c_lo:.4g}, {band.c_hi:.4g})")
    return grid[keep], band


# --------------------------------------------------------------------------
# on-disk sample sets
# --------------------------------------------------------------------------

def write_sample_set(path, points, n: int, density: int, label: int | None = None):
    """Binary little-endian float64 records plus a ``.json`` sidecar; returns the sidecar path."""
    path = Path(path)
    pts = np.ascontiguousarray(np.asarray(points, dtype="<f8").reshape(-1, n))
    pts.tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    meta = {"n": int(n), "density": int(density), "label": label, "count": int(pts.shape[0])}
    sidecar.write_text(json.dumps(meta))
    return sidecar


def read_sample_set(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    pts = np.fromfile(path, dtype="<f8").reshape(-1, meta["n"])
    if pts.shape[0] != meta["count"]:
        raise InvalidInput("sample file length disagrees with its sidecar count")
    return pts, meta
