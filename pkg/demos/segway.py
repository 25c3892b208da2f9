"""Train a segway controller with a quadratic Lyapunov function, certify a sublevel set, and simulate.

Takes about a minute and a half with the default settings.
"""
import time

import numpy as np
import scipy.linalg

from fiode.control import ClosedLoop, linearize, lqr_gain
from fiode.network import ControllerNet
from fiode.ode import IntegratorConfig, rollout
from fiode.simplex import Quadratic
from fiode.train import SEGWAY, ControllerTrainConfig, train_controller
from fiode.verify.certify import search_level


def main():
    A, B = linearize()
    K = lqr_gain(A, B)
    print("reference gain", np.round(K, 3))
    P0 = scipy.linalg.solve_continuous_lyapunov((A - B @ K).T, -np.eye(3))
    ctrl = ControllerNet.init(np.random.default_rng(0), hidden=32, bias=False)
    t0 = time.perf_counter()
    ctrl, P = train_controller(ctrl, SEGWAY, P0, K, ControllerTrainConfig())
    print(f"trained in {time.perf_counter() - t0:.1f}s; P =\n{np.round(P, 3)}")

    loop = ClosedLoop.segway(ctrl)
    t0 = time.perf_counter()
    level, rep = search_level(loop, Quadratic(P), r=0.005)
    print(f"certification {rep.verdict} at level {level} over {rep.samples} boxes "
          f"in {time.perf_counter() - t0:.1f}s")
    if level is None:
        return

    # uniform draws inside the certified ellipsoid
    rng = np.random.default_rng(0)
    u = rng.standard_normal((100, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    R = np.linalg.cholesky(P)
    X0 = np.linalg.solve(R.T, (u * np.sqrt(level) * rng.random((100, 1)) ** (1 / 3)).T).T
    traj = rollout(loop, X0, IntegratorConfig("rk4", 0.01, 10.0))
    V = np.einsum("tbi,ij,tbj->tb", traj.states, P, traj.states)
    print(f"max V over 100 trajectories {V.max():.4f} (level {level:.4f}); "
          f"mean V at 10s {V[-1].mean():.2e}")


if __name__ == "__main__":
    main()
