"""Hand-set models for certificate tests."""
import numpy as np

from fiode.models import ClassifierModel
from fiode.network import Dense, DynamicsNet, ReLU
from fiode.ode import IntegratorConfig

MEANS = np.array([[np.cos(a), np.sin(a)] for a in 2 * np.pi * np.arange(3) / 3])


def gradient_flow_model(scale=5.0, kappa=None, eps=0.05, horizon=5.0, lip_v=np.sqrt(2), v_lo=1.0):
    """f_hat_k(eta, x) = scale * mu_k . x, independent of eta, written as a dynamics net.

    The x-branch emits [G x, -G x]; the eta-branch adds a zero map, passes the
    two halves through ReLUs, and recombines them as relu(z) - relu(-z) = z.
    """
    G = MEANS
    x_layers = [Dense(np.vstack([G, -G]), np.zeros(6))]
    eta_layers = [Dense(np.zeros((6, 3))), ReLU(), Dense(np.eye(6), np.zeros(6)), ReLU(),
                  Dense(scale * np.hstack([np.eye(3), -np.eye(3)]), np.zeros(3))]
    net = DynamicsNet(x_layers, eta_layers)
    model = ClassifierModel(net=net, integrator=IntegratorConfig("rk4", 0.05, horizon))
    if kappa is None:
        kappa = 1.2 * eps * lip_v * net.lipschitz("input_x") / v_lo
    model.kappa = kappa
    return model
