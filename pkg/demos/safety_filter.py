"""The simplex safety filter on a few hand-picked raw vectors."""
import numpy as np

from fiode.cbf_qp import ClassK, QpProblem, solve_cbf_qp


def main():
    alpha = ClassK()
    eta = np.array([0.9, 0.08, 0.02])
    lower = -alpha(eta)
    print("state", eta, "lower bounds", np.round(lower, 4))
    for f_hat in ([1.0, -0.5, -0.5], [-3.0, 1.0, 2.0], [0.0, 0.0, -4.0]):
        sol = solve_cbf_qp(QpProblem(np.array(f_hat), lower))
        print(f"raw {f_hat} -> filtered {np.round(sol.f, 4)}  (sum {sol.f.sum():+.1e}, lambda {sol.lam:+.4f})")


if __name__ == "__main__":
    main()
