import json
from math import comb

import numpy as np
import pytest
from scipy.spatial import cKDTree

from fiode.errors import BudgetExceeded, EmptyBand, InvalidInput
from fiode.sampling import (boundary_count, box_grid, brute_force_boundary, compositions, read_sample_set,
                            rejection_filter, sample_decision_boundary, sample_simplex_grid, write_sample_set)
from fiode.simplex import Quadratic
from oracles import random_boundary_points


def as_set(points):
    return {tuple(np.round(p, 12)) for p in points}


def test_grid_examples():
    assert as_set(sample_simplex_grid(2, 2).points) == {(0.0, 1.0), (0.5, 0.5), (1.0, 0.0)}
    assert as_set(sample_simplex_grid(3, 1).points) == {(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)}
    assert len(sample_simplex_grid(3, 2)) == 6


@pytest.mark.parametrize("n", range(2, 7))
def test_grid_cardinality(n):
    for d in range(1, 13):
        g = sample_simplex_grid(n, d)
        assert len(g) == comb(d + n - 1, n - 1)
        assert np.all(g.counts.sum(1) == d) and g.counts.min() >= 0


def test_grid_is_lexicographic_and_unique():
    c = compositions(5, 3)
    assert [tuple(r) for r in c] == sorted(tuple(r) for r in c)
    assert len({tuple(r) for r in c}) == len(c)


def test_grid_budget():
    with pytest.raises(BudgetExceeded):
        sample_simplex_grid(10, 40, budget=1000)


def test_boundary_examples():
    assert as_set(sample_decision_boundary(2, 2, 0).points) == {(0.5, 0.5)}
    assert as_set(sample_decision_boundary(3, 6, 0).points) == as_set(
        [(0.5, 0.5, 0.0), (0.5, 0.0, 0.5), (1 / 3, 1 / 3, 1 / 3)])
    assert as_set(sample_decision_boundary(4, 2, 0).points) == as_set(
        [(0.5, 0.5, 0, 0), (0.5, 0, 0.5, 0), (0.5, 0, 0, 0.5)])


def test_boundary_preconditions():
    with pytest.raises(InvalidInput):
        sample_decision_boundary(3, 5, 0)
    with pytest.raises(InvalidInput):
        sample_decision_boundary(3, 4, 0)  # 4 = 1 mod 3
    with pytest.raises(InvalidInput):
        sample_decision_boundary(3, 6, 3)


def test_boundary_count_recursion():
    for n in range(2, 6):
        for d in range(2, 13, 2):
            if d % n != 1:
                assert boundary_count(n, d) == len(brute_force_boundary(n, d, 0))


def test_boundary_count_matches_published_size():
    # ten classes at density 40: about 4.13e7 boundary samples per class
    assert round(boundary_count(10, 40) / 1e7, 2) == 4.13


def test_covering_simplex_grid(rng):
    for n, d in [(3, 10), (4, 6)]:
        tree = cKDTree(sample_simplex_grid(n, d).points)
        dist, _ = tree.query(rng.dirichlet(np.ones(n), size=100_000), p=np.inf)
        assert dist.max() <= 1 / d + 1e-12


def test_covering_boundary(rng):
    for n, d, y in [(3, 20, 0), (4, 10, 2), (6, 8, 5)]:
        tree = cKDTree(sample_decision_boundary(n, d, y).points)
        dist, _ = tree.query(random_boundary_points(rng, n, y, 100_000), p=np.inf)
        assert dist.max() <= 1 / d + 1e-12


def test_rejection_examples():
    V = Quadratic(np.eye(2))
    acc, band = rejection_filter(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), 0.01, V, 1.0)
    np.testing.assert_array_equal(acc, [[1.0, 0.0]])
    assert band.c_lo < 1.0 < band.c_hi
    with pytest.raises(EmptyBand):
        rejection_filter(box_grid([5, 5], [6, 6], 0.1), 0.1, V, 1.0)


def test_rejection_covering(rng):
    r = 0.05
    V = Quadratic(np.array([[1.0, 0.3], [0.3, 0.5]]))
    grid = box_grid([-2, -2], [2, 2], r)
    acc, band = rejection_filter(grid, r, V, 1.0)
    vals = V.value(acc)
    assert np.all((vals > band.c_lo) & (vals < band.c_hi))
    u = rng.standard_normal((1000, 2))
    u /= np.sqrt(V.value(u))[:, None]
    dist, _ = cKDTree(acc).query(u, p=np.inf)
    assert dist.max() <= r / 2 + 1e-12


def test_sample_file_round_trip(tmp_path):
    pts = sample_decision_boundary(3, 6, 1).points
    sidecar = write_sample_set(tmp_path / "s.bin", pts, 3, 6, 1)
    meta = json.loads(sidecar.read_text())
    assert meta == {"n": 3, "density": 6, "label": 1, "count": 3}
    back, _ = read_sample_set(tmp_path / "s.bin")
    np.testing.assert_array_equal(back, pts)
    assert (tmp_path / "s.bin").stat().st_size == 3 * 3 * 8
