import csv

import numpy as np
import pytest

from fiode.cbf_qp import ClassK
from fiode.errors import InvalidInput, NumericalFailure
from fiode.models import zero_classifier
from fiode.network import DynamicsNet
from fiode.ode import FilteredDynamics, IntegratorConfig, Trajectory, classify, predict, rollout
from fiode.simplex import uniform_point


def test_config_validation():
    assert IntegratorConfig().steps == 100
    with pytest.raises(InvalidInput):
        IntegratorConfig(dt=0.03, horizon=1.0)
    with pytest.raises(InvalidInput):
        IntegratorConfig(method="dopri5")
    with pytest.raises(InvalidInput):
        IntegratorConfig(dt=-0.1)


def test_zero_dynamics_constant():
    eta0 = np.array([0.2, 0.3, 0.5])
    traj = rollout(lambda y: np.zeros_like(y), eta0, IntegratorConfig(dt=0.1, horizon=1.0))
    assert np.all(traj.states == eta0)
    np.testing.assert_array_equal(traj.final, eta0)


def test_rk4_exponential_decay():
    traj = rollout(lambda y: -y, np.array([1.0]), IntegratorConfig("rk4", 0.01, 1.0))
    assert abs(traj.final[0] - np.exp(-1)) < 1e-6


def test_nonfinite_state_raises():
    with pytest.raises(NumericalFailure):
        rollout(lambda y: np.full_like(y, np.inf), np.ones(2), IntegratorConfig(dt=0.5, horizon=1.0))


@pytest.mark.parametrize("method, order", [("euler", 1.0), ("rk4", 4.0)])
def test_convergence_order(method, order):
    rot = lambda y: np.stack([y[..., 1], -y[..., 0]], axis=-1)
    exact = np.array([np.cos(1.0), -np.sin(1.0)])
    errs = []
    for dt in (0.1, 0.05, 0.025):
        y = rollout(rot, np.array([1.0, 0.0]), IntegratorConfig(method, dt, 1.0)).final
        errs.append(np.linalg.norm(y - exact))
    measured = np.log2(errs[1] / errs[2])
    assert abs(measured - order) < 0.5


def test_simplex_invariance_for_random_nets(rng):
    for seed in range(5):
        net = DynamicsNet.init(np.random.default_rng(seed), 4, 2, hidden=16, orthogonal=False)
        X = rng.normal(size=(20, 2)) * 3
        E0 = np.tile(uniform_point(4), (20, 1))
        traj = rollout(FilteredDynamics(net, X, ClassK()), E0, IntegratorConfig("rk4", 0.05, 2.0), simplex=True)
        assert traj.states.min() >= -1e-9
        assert np.abs(traj.states.sum(-1) - 1).max() <= 1e-9


def test_simplex_invariance_without_reprojection(rng):
    net = DynamicsNet.init(rng, 3, 2, hidden=16, orthogonal=False)
    traj = rollout(FilteredDynamics(net, rng.normal(size=(10, 2)), ClassK()),
                   np.tile(uniform_point(3), (10, 1)), IntegratorConfig("rk4", 0.01, 1.0))
    assert np.abs(traj.states.sum(-1) - 1).max() <= 1e-9
    assert traj.states.min() >= -1e-3


def test_classify_examples():
    assert classify(np.array([0.6, 0.3, 0.1])) == 0
    assert classify(uniform_point(3)) == 0
    np.testing.assert_array_equal(classify(np.array([[0.1, 0.9], [0.7, 0.3]])), [1, 0])


def test_predict_zero_model_stays_uniform(rng):
    m = zero_classifier(3, 2, integrator=IntegratorConfig(dt=0.1, horizon=1.0))
    np.testing.assert_array_equal(predict(m, rng.normal(size=(4, 2))), 0)


def test_trajectory_csv(tmp_path):
    traj = Trajectory(np.array([0.0, 0.5]), np.array([[0.5, 0.5], [0.25, 0.75]]))
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "eta_0", "eta_1"]
    assert [float(v) for v in rows[2]] == [0.5, 0.25, 0.75]
    batch = Trajectory(np.array([0.0]), np.zeros((1, 2, 3)))
    with pytest.raises(InvalidInput):
        batch.to_csv(path)
