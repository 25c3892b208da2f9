"""Small feedforward networks with hand-written reverse mode.

Every layer exposes ``forward(x) -> (y, cache)`` and
``backward(cache, g) -> (dx, grads)`` where ``grads`` is a dict keyed like
``layer.params``. Inputs are batch-first ``(B, d)``.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInput


def cayley_orthogonalize(A):
    """W = (I - S)(I + S)^{-1} with S the skew-symmetric part of A."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInput("Cayley parameter must be square")
    S = 0.5 * (A - A.T)
    eye = np.eye(A.shape[0])
    # (I - S) and (I + S)^{-1} commute
    return np.linalg.solve(eye + S, eye - S)


def _cayley_vjp(A, G):
    """Pull ``G = dL/dW`` back to ``dL/dA``; uses W = 2 (I + S)^{-1} - I."""
    S = 0.5 * (A - A.T)
    M = np.linalg.inv(np.eye(A.shape[0]) + S)
    GS = -2.0 * M.T @ G @ M.T
    return 0.5 * (GS - GS.T)


class Dense:
    kind = "dense"

    def __init__(self, W, b=None):
        self.W = np.array(W, dtype=float)
        if self.W.ndim != 2:
            raise InvalidInput("dense weight must be a matrix")
        self.b = None if b is None else np.array(b, dtype=float)
        if self.b is not None and self.b.shape != (self.W.shape[0],):
            raise InvalidInput("dense bias does not match weight rows")

    @classmethod
    def init(cls, out_dim, in_dim, rng, bias=True, scale=None):
        scale = np.sqrt(2.0 / in_dim) if scale is None else scale
        W = rng.normal(0.0, scale, size=(out_dim, in_dim))
        return cls(W, np.zeros(out_dim) if bias else None)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    @property
    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def weight(self):
        return self.W

    def bias(self):
        return np.zeros(self.out_dim) if self.b is None else self.b

    def forward(self, x):
        return x @ self.W.T + self.bias(), x

    def backward(self, x, g):
        grads = {"W": g.T @ x}
        if self.b is not None:
            grads["b"] = g.sum(axis=0)
        return g @ self.W, grads

    def spectral_norm(self):
        return float(np.linalg.norm(self.W, 2))


class OrthogonalDense:
    """Affine layer whose weight is a slice of a Cayley-orthogonal square matrix."""

    kind = "orthogonal_dense"

    def __init__(self, A, shape, b=None):
        self.A = np.array(A, dtype=float)
        self.shape = (int(shape[0]), int(shape[1]))
        k = max(self.shape)
        if self.A.shape != (k, k):
            raise InvalidInput(f"orthogonal parameter must be {k}x{k} for shape {self.shape}")
        self.b = None if b is None else np.array(b, dtype=float)
        if self.b is not None and self.b.shape != (self.shape[0],):
            raise InvalidInput("orthogonal bias does not match output size")

    @classmethod
    def init(cls, out_dim, in_dim, rng, bias=True, scale=0.5):
        k = max(out_dim, in_dim)
        A = rng.normal(0.0, scale, size=(k, k))
        return cls(A, (out_dim, in_dim), np.zeros(out_dim) if bias else None)

    @property
    def in_dim(self):
        return self.shape[1]

    @property
    def out_dim(self):
        return self.shape[0]

    @property
    def params(self):
        p = {"A": self.A}
        if self.b is not None:
            p["b"] = self.b
        return p

    def weight(self):
        r, c = self.shape
        return cayley_orthogonalize(self.A)[:r, :c]

    def bias(self):
        return np.zeros(self.out_dim) if self.b is None else self.b

    def forward(self, x):
        return x @ self.weight().T + self.bias(), x

    def backward(self, x, g):
        r, c = self.shape
        G = np.zeros_like(self.A)
        G[:r, :c] = g.T @ x
        grads = {"A": _cayley_vjp(self.A, G)}
        if self.b is not None:
            grads["b"] = g.sum(axis=0)
        return g @ self.weight(), grads

    def spectral_norm(self):
        return 1.0


class ReLU:
    kind = "relu"
    params: dict = {}

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, mask, g):
        return g * mask, {}

    def spectral_norm(self):
        return 1.0


def _is_affine(layer):
    return isinstance(layer, (Dense, OrthogonalDense))


def run_forward(layers, x):
    caches = []
    for layer in layers:
        x, c = layer.forward(x)
        caches.append(c)
    return x, caches


def run_backward(layers, caches, g):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        g, grads[i] = layers[i].backward(caches[i], g)
    return g, grads


def affine_chain(layers):
    """Materialise a layer list as ``[(W, b) | "relu", ...]`` for bound propagation."""
    out = []
    for layer in layers:
        if _is_affine(layer):
            out.append((layer.weight(), layer.bias()))
        elif isinstance(layer, ReLU):
            out.append("relu")
        else:
            raise InvalidInput(f"unsupported layer {layer!r}")
    return out


class Sequential:
    """Plain layer stack; used for controllers and for the x-branch of the dynamics."""

    def __init__(self, layers):
        self.layers = list(layers)

    @property
    def in_dim(self):
        return next(l.in_dim for l in self.layers if _is_affine(l))

    @property
    def out_dim(self):
        return next(l.out_dim for l in reversed(self.layers) if _is_affine(l))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.in_dim:
            raise InvalidInput(f"input has dimension {X.shape[1]}, network expects {self.in_dim}")
        y, _ = run_forward(self.layers, X)
        return y[0] if squeeze else y

    __call__ = forward

    def backward(self, x, cot):
        """Returns ``(param_grads, d_x)``; param grads are per-layer dicts summed over the batch."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        G = np.atleast_2d(np.asarray(cot, dtype=float))
        y, caches = run_forward(self.layers, X)
        if G.shape != y.shape:
            raise InvalidInput("cotangent shape does not match output")
        dx, grads = run_backward(self.layers, caches, G)
        return grads, dx

    def parameters(self):
        return [layer.params for layer in self.layers]

    def affine_chain(self):
        return affine_chain(self.layers)

    def lipschitz(self):
        return float(np.prod([l.spectral_norm() for l in self.layers]))


class ControllerNet(Sequential):
    """State -> scalar torque MLP (three dense layers with ReLU by default)."""

    @classmethod
    def init(cls, rng, state_dim=3, hidden=32, depth=3, scale=None, bias=True):
        """``bias=False`` gives a positively homogeneous net, so ``u(0) = 0`` exactly."""
        dims = [state_dim] + [hidden] * (depth - 1) + [1]
        layers = []
        for i in range(depth):
            layers.append(Dense.init(dims[i + 1], dims[i], rng, scale=scale, bias=bias))
            if i < depth - 1:
                layers.append(ReLU())
        return cls(layers)

    @classmethod
    def linear(cls, K):
        """u = -K x as a single dense layer without bias."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return cls([Dense(-K, None)])


class DynamicsNet:
    """Raw classifier dynamics ``f_hat(eta, x) = W3 relu(W2 relu(W1 eta + g(x)) + b2) + b3``.

    ``eta_layers[0]`` must be affine; ``g(x)`` is added to its output before
    the remaining ``eta_layers`` run.
    """

    def __init__(self, x_layers, eta_layers):
        self.x_layers = list(x_layers)
        self.eta_layers = list(eta_layers)
        if not self.eta_layers or not _is_affine(self.eta_layers[0]):
            raise InvalidInput("first eta layer must be affine")
        g_out = next(l.out_dim for l in reversed(self.x_layers) if _is_affine(l))
        if g_out != self.eta_layers[0].out_dim:
            raise InvalidInput("g(x) output must match the first eta layer width")

    @classmethod
    def init(cls, rng, n, x_dim, hidden=64, orthogonal=True):
        Layer = OrthogonalDense if orthogonal else Dense
        x_layers = [Layer.init(hidden, x_dim, rng), ReLU(), Layer.init(hidden, hidden, rng)]
        eta_layers = [
            Layer.init(hidden, n, rng, bias=False), ReLU(),
            Layer.init(hidden, hidden, rng), ReLU(),
            Layer.init(n, hidden, rng),
        ]
        return cls(x_layers, eta_layers)

    @property
    def n(self):
        return self.eta_layers[0].in_dim

    @property
    def x_dim(self):
        return next(l.in_dim for l in self.x_layers if _is_affine(l))

    @property
    def layers(self):
        return self.x_layers + self.eta_layers

    def _prep(self, eta, x):
        eta = np.asarray(eta, dtype=float)
        x = np.asarray(x, dtype=float)
        squeeze = eta.ndim == 1 and x.ndim == 1
        E, X = np.atleast_2d(eta), np.atleast_2d(x)
        if E.shape[1] != self.n or X.shape[1] != self.x_dim:
            raise InvalidInput(
                f"shapes eta{E.shape} x{X.shape} do not match net (n={self.n}, x_dim={self.x_dim})")
        if E.shape[0] != X.shape[0]:
            if E.shape[0] == 1:
                E = np.repeat(E, X.shape[0], axis=0)
            elif X.shape[0] == 1:
                X = np.repeat(X, E.shape[0], axis=0)
            else:
                raise InvalidInput("batch sizes of eta and x differ")
        return E, X, squeeze

    def g(self, x):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        y, _ = run_forward(self.x_layers, X)
        return y

    def _forward(self, E, X):
        gx, gc = run_forward(self.x_layers, X)
        h, c0 = self.eta_layers[0].forward(E)
        out, rc = run_forward(self.eta_layers[1:], h + gx)
        return out, (gc, c0, rc)

    def forward(self, eta, x):
        E, X, squeeze = self._prep(eta, x)
        out, _ = self._forward(E, X)
        return out[0] if squeeze else out

    __call__ = forward

    def backward(self, eta, x, cot):
        """Vector-Jacobian products: ``(param_grads, d_eta, d_x)``.

        ``param_grads`` is a list of dicts aligned with :attr:`layers`.
        """
        E, X, _ = self._prep(eta, x)
        out, (gc, c0, rc) = self._forward(E, X)
        G = np.atleast_2d(np.asarray(cot, dtype=float))
        if G.shape != out.shape:
            raise InvalidInput("cotangent shape does not match output")
        gh, rest = run_backward(self.eta_layers[1:], rc, G)
        d_eta, first = self.eta_layers[0].backward(c0, gh)
        d_x, xg = run_backward(self.x_layers, gc, gh)
        return xg + [first] + rest, d_eta, d_x

    def parameters(self):
        return [layer.params for layer in self.layers]

    def eta_chain(self, x):
        """Affine/ReLU chain in eta alone, with g(x) folded into the first bias."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        chain = affine_chain(self.eta_layers)
        W1, b1 = chain[0]
        chain[0] = (W1, b1 + self.g(x)[0])
        return chain

    def lipschitz(self, wrt="input_x"):
        """Product of layer spectral norms along the requested path."""
        tail = self.eta_layers[1:]
        if wrt == "input_x":
            path = self.x_layers + tail
        elif wrt == "state_eta":
            path = self.eta_layers
        else:
            raise InvalidInput(f"unknown Lipschitz path {wrt!r}")
        return float(np.prod([l.spectral_norm() for l in path]))


def lipschitz_bound(net, wrt="input_x"):
    if isinstance(net, DynamicsNet):
        return net.lipschitz(wrt)
    return net.lipschitz()


def forward(net, eta, x):
    return net.forward(eta, x)


def backward(net, eta, x, cotangent):
    return net.backward(eta, x, cotangent)


def flat_params(net) -> np.ndarray:
    return np.concatenate([a.ravel() for p in net.parameters() for a in p.values()])


def set_flat_params(net, vec):
    vec = np.asarray(vec, dtype=float)
    i = 0
    for p in net.parameters():
        for a in p.values():
            a[...] = vec[i:i + a.size].reshape(a.shape)
            i += a.size
    if i != vec.size:
        raise InvalidInput("parameter vector has the wrong length")


def flat_grads(grads) -> np.ndarray:
    return np.concatenate([a.ravel() for p in grads for a in p.values()])


def sgd_step(net, grads, lr):
    for p, g in zip(net.parameters(), grads):
        for k, a in p.items():
            a -= lr * g[k]
