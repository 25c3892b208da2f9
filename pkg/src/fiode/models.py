"""Model containers and their JSON file format.

A model file is one JSON object::

    {"kind": "classifier" | "controller",
     "layers": [{"type": "dense" | "orthogonal_dense" | "relu",
                 "branch": "x" | "eta" | "u",
                 "shape": [rows, cols], "data": [...], "bias": [...] | null}, ...],
     "alpha": {"c1": ..., "c2": ...}, "potential": {...}, "kappa": ...,
     "integrator": {...}, "n": ..., "x_dim": ...}

Floats are written with ``repr`` so a round trip is exact. ``orthogonal_dense``
stores the square Cayley parameter in ``data`` and the sliced weight shape in
``shape``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cbf_qp import ClassK
from .errors import InvalidInput, ParseError
from .network import ControllerNet, Dense, DynamicsNet, OrthogonalDense, ReLU
from .ode import IntegratorConfig
from .simplex import Potential, Quadratic, potential_from_dict

LAYER_TYPES = ("dense", "orthogonal_dense", "relu")


@dataclass
class ClassifierModel:
    net: DynamicsNet
    alpha: ClassK = field(default_factory=ClassK)
    kappa: float = 0.1
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    potential: str = "margin"

    @property
    def n(self):
        return self.net.n

    @property
    def x_dim(self):
        return self.net.x_dim

    def potential_for(self, label) -> Potential:
        return potential_from_dict({"kind": self.potential, "label": int(label)}, self.n)

    @classmethod
    def init(cls, rng, n, x_dim, hidden=64, orthogonal=True, **kw):
        return cls(net=DynamicsNet.init(rng, n, x_dim, hidden=hidden, orthogonal=orthogonal), **kw)


@dataclass
class ControllerModel:
    controller: ControllerNet
    P: np.ndarray
    level: float | None = None

    @property
    def V(self) -> Quadratic:
        return Quadratic(self.P)


def zero_classifier(n, x_dim, hidden=8, **kw) -> ClassifierModel:
    """All weights and biases zero, so the filtered dynamics vanish everywhere."""
    x_layers = [Dense(np.zeros((hidden, x_dim)), np.zeros(hidden))]
    eta_layers = [Dense(np.zeros((hidden, n)), None), ReLU(), Dense(np.zeros((n, hidden)), np.zeros(n))]
    return ClassifierModel(net=DynamicsNet(x_layers, eta_layers), **kw)


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------

def _floats(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def _encode_layer(layer, branch):
    if isinstance(layer, ReLU):
        return {"type": "relu", "branch": branch}
    if isinstance(layer, OrthogonalDense):
        return {"type": "orthogonal_dense", "branch": branch, "shape": list(layer.shape),
                "data": _floats(layer.A), "bias": None if layer.b is None else _floats(layer.b)}
    if isinstance(layer, Dense):
        return {"type": "dense", "branch": branch, "shape": list(layer.W.shape),
                "data": _floats(layer.W), "bias": None if layer.b is None else _floats(layer.b)}
    raise InvalidInput(f"cannot serialise layer {layer!r}")


def model_to_dict(model) -> dict:
    if isinstance(model, ClassifierModel):
        layers = ([_encode_layer(l, "x") for l in model.net.x_layers]
                  + [_encode_layer(l, "eta") for l in model.net.eta_layers])
        return {"kind": "classifier", "n": model.n, "x_dim": model.x_dim, "layers": layers,
                "alpha": model.alpha.to_dict(), "kappa": float(model.kappa),
                "potential": {"kind": model.potential}, "integrator": model.integrator.to_dict()}
    if isinstance(model, ControllerModel):
        return {"kind": "controller", "layers": [_encode_layer(l, "u") for l in model.controller.layers],
                "potential": Quadratic(model.P).to_dict(),
                "level": None if model.level is None else float(model.level)}
    raise InvalidInput(f"cannot serialise {type(model).__name__}")


def serialize_model(model, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------

def _offset_of(text, needle):
    i = text.find(needle)
    return len(text[:max(i, 0)].encode())


def _decode_layer(d, text):
    t = d.get("type")
    if t not in LAYER_TYPES:
        raise ParseError(f"unknown layer type {t!r}", _offset_of(text, json.dumps(t)))
    if t == "relu":
        return ReLU()
    shape = tuple(int(v) for v in d["shape"])
    data = np.asarray(d["data"], dtype=float)
    bias = None if d.get("bias") is None else np.asarray(d["bias"], dtype=float)
    if t == "dense":
        return Dense(data.reshape(shape), bias)
    k = max(shape)
    return OrthogonalDense(data.reshape(k, k), shape, bias)


def model_from_dict(d: dict, text: str = ""):
    kind = d.get("kind")
    layers = d.get("layers")
    if not isinstance(layers, list):
        raise ParseError("model file has no layer list", _offset_of(text, '"layers"'))
    try:
        decoded = [(_decode_layer(l, text), l.get("branch")) for l in layers]
        if kind == "classifier":
            net = DynamicsNet([l for l, b in decoded if b == "x"], [l for l, b in decoded if b == "eta"])
            pot = d.get("potential", {}).get("kind", "margin")
            if pot not in ("margin", "mll"):
                raise InvalidInput(f"classifier potential must be margin or mll, got {pot!r}")
            return ClassifierModel(net=net, alpha=ClassK(**d.get("alpha", {})), kappa=float(d["kappa"]),
                                   integrator=IntegratorConfig(**d.get("integrator", {})), potential=pot)
        if kind == "controller":
            V = potential_from_dict(d["potential"])
            level = d.get("level")
            return ControllerModel(controller=ControllerNet([l for l, _ in decoded]), P=V.P,
                                   level=None if level is None else float(level))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, InvalidInput) as e:
        raise ParseError(f"malformed model file: {e}", 0) from e
    raise ParseError(f"unknown model kind {kind!r}", _offset_of(text, '"kind"'))


def deserialize_model(path):
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError("model file is not UTF-8", e.start) from e
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", len(text[:e.pos].encode())) from e
    if not isinstance(d, dict):
        raise ParseError("model file must hold a JSON object", 0)
    return model_from_dict(d, text)

