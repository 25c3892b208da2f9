"""Command-line entry point: ``fiode <command> [--config run.json] [--out DIR] [--threads N]``.

Exit status: 0 success, 1 certification failed, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy.linalg

from .cbf_qp import ClassK
from .control import ClosedLoop, linearize, lqr_gain, vdot_grid, write_vdot_grid_csv
from .errors import FiodeError, ParseError
from .models import ClassifierModel, ControllerModel, deserialize_model, serialize_model
from .network import ControllerNet
from .ode import FilteredDynamics, IntegratorConfig, Trajectory, predict, rollout
from .sampling import sample_decision_boundary, sample_simplex_grid, write_sample_set
from .simplex import LevelBand, Quadratic, potential_from_dict, uniform_point
from .train import (SEGWAY, ControllerTrainConfig, SamplingScheduler, TrainConfig, toy_dataset,
                    train_classifier, train_controller)
from .verify.certify import CertificationReport, certify_classifier, certify_invariant_set, search_level

log = logging.getLogger("fiode")

COMMANDS = ("train-classifier", "train-controller", "certify-classifier", "certify-controller",
            "rollout", "sample", "export-plots")

DEFAULTS = {
    "task": "classifier",
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {"count": 300, "sigma": 0.3, "classes": 3, "seed": 0, "test_count": 150, "test_seed": 1},
    "train": {"lr": 0.1, "iterations": 1000, "batch_size": 32, "state_batch": 8, "eps": 0.05,
              "kappa_policy": "adaptive", "kappa": 0.1, "hidden": 64, "orthogonal": True,
              "potential": "margin", "final_weight": 0.8},
    "controller_train": {"imitation_iterations": 2000, "imitation_lr": 0.02, "lyapunov_iterations": 300,
                         "lyapunov_lr": 0.002, "p_lr": 0.0005, "batch": 256, "level": 0.05, "kappa": 0.5,
                         "hidden": 32},
    "integrator": {"method": "rk4", "dt": 0.05, "horizon": 5.0},
    "certify": {"eps": 0.05, "density": 20, "mode": "crown", "max_points": 50, "grid_spacing": 0.005,
                "domain": [-1.0, 1.0]},
    "rollout": {"count": 100, "horizon": 10.0, "dt": 0.01},
    "sample": {"n": 3, "density": 20, "label": None},
}


class UsageError(Exception):
    pass


def load_schema():
    return json.loads(resources.files("fiode").joinpath("config_schema.json").read_text())


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _first_offending_key(err: jsonschema.ValidationError):
    path = list(err.absolute_path)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            path.append(extra[0])
    return ".".join(str(p) for p in path) or "<root>"


def resolve_config(path=None, overrides=None):
    """Read, validate, and merge a config document with the defaults."""
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise UsageError(f"config is not valid JSON: {ParseError(e.msg, len(text[:e.pos].encode()))}") from e
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise UsageError(f"config key {_first_offending_key(err)!r}: {err.message}")
    cfg = _merge(DEFAULTS, doc)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    return cfg


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _out_dir(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_path(cfg):
    return Path(cfg.get("model_path") or Path(cfg["output_dir"]) / "model.json")


def _load_model(cfg, kind):
    path = _model_path(cfg)
    if not path.exists():
        raise UsageError(f"model file {path} not found")
    model = deserialize_model(path)
    if not isinstance(model, kind):
        raise UsageError(f"{path} does not hold a {kind.__name__}")
    return model


def _datasets(cfg):
    d = cfg["dataset"]
    train = toy_dataset(d["seed"], d["count"], d["sigma"], d["classes"])
    test = toy_dataset(d["test_seed"], d["test_count"], d["sigma"], d["classes"])
    return train, test


def _write_report(out, report: CertificationReport, name="report.json"):
    path = out / name
    path.write_text(report.to_json())
    return path


def _domain(cfg, dim=3):
    lo, hi = cfg["certify"]["domain"]
    return np.full(dim, float(lo)), np.full(dim, float(hi))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train_classifier(cfg, threads):
    out = _out_dir(cfg)
    (X, y), _ = _datasets(cfg)
    t = cfg["train"]
    rng = np.random.default_rng(cfg["seed"])
    model = ClassifierModel.init(rng, cfg["dataset"]["classes"], X.shape[1], hidden=t["hidden"],
                                 orthogonal=t["orthogonal"], integrator=IntegratorConfig(**cfg["integrator"]),
                                 potential=t["potential"], alpha=ClassK())
    tc = TrainConfig(lr=t["lr"], iterations=t["iterations"], batch_size=t["batch_size"],
                     state_batch=t["state_batch"], eps=t["eps"], kappa_policy=t["kappa_policy"],
                     kappa=t["kappa"], seed=cfg["seed"])
    sched = SamplingScheduler(tc.iterations, final_weight=t["final_weight"])
    model, hist = train_classifier(model, (X, y), tc, sched, history_path=out / "history.csv")
    serialize_model(model, out / "model.json")
    log.info("trained classifier: final loss %.3g, kappa %.4g", hist[-1]["loss"] if hist else float("nan"),
             model.kappa)
    return 0


def cmd_train_controller(cfg, threads):
    out = _out_dir(cfg)
    c = cfg["controller_train"]
    A, B = linearize()
    K = lqr_gain(A, B)
    P0 = scipy.linalg.solve_continuous_lyapunov((A - B @ K).T, -np.eye(3))
    ctrl = ControllerNet.init(np.random.default_rng(cfg["seed"]), hidden=c["hidden"], bias=False)
    tc = ControllerTrainConfig(imitation_iterations=c["imitation_iterations"], imitation_lr=c["imitation_lr"],
                               lyapunov_iterations=c["lyapunov_iterations"], lyapunov_lr=c["lyapunov_lr"],
                               p_lr=c["p_lr"], batch=c["batch"], level=c["level"], kappa=c["kappa"],
                               grid_spacing=cfg["certify"]["grid_spacing"], seed=cfg["seed"])
    history = []
    ctrl, P = train_controller(ctrl, SEGWAY, P0, K, tc, history)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "iter", "loss"])
        for row in history:
            w.writerow([row["stage"], row["iter"], repr(row["loss"])])
    serialize_model(ControllerModel(ctrl, P), out / "model.json")
    log.info("trained controller; LQR reference gain %s", K.ravel().tolist())
    return 0


def cmd_certify_classifier(cfg, threads):
    out = _out_dir(cfg)
    model = _load_model(cfg, ClassifierModel)
    c = cfg["certify"]
    if "inputs" in c:
        X = np.asarray(c["inputs"], dtype=float)
        y = np.asarray(c.get("labels", []), dtype=int)
        if y.shape != (X.shape[0],):
            raise UsageError("certify.inputs and certify.labels must have the same length")
    else:
        _, (Xt, yt) = _datasets(cfg)
        correct = predict(model, Xt) == yt
        X, y = Xt[correct][: c["max_points"]], yt[correct][: c["max_points"]]
    potential = c.get("potential", model.potential)
    band = LevelBand(*c["band"]) if "band" in c else None
    points, reports = [], []
    for i, (xi, yi) in enumerate(zip(X, y)):
        V = potential_from_dict({"kind": potential, "label": int(yi)}, model.n)
        rep = certify_classifier(model, xi, int(yi), c["eps"], V=V, band=band, density=c["density"],
                                 mode=c["mode"], threads=threads)
        reports.append(rep)
        points.append({"index": i, "label": int(yi), "verdict": rep.verdict, "reason": rep.reason,
                       "samples": rep.samples})
    failed = [r for r in reports if not r.certified]
    first = failed[0] if failed else None
    certified = len(reports) - len(failed)
    report = CertificationReport(
        verdict="Failed" if failed or not reports else "Certified",
        reason=None if not failed else first.reason,
        samples=sum(r.samples for r in reports),
        violations=[] if first is None else first.violations,
        elapsed_s=sum(r.elapsed_s for r in reports),
        details={"points": points, "certified": certified, "total": len(reports),
                 "certified_fraction": certified / len(reports) if reports else 0.0,
                 "eps": c["eps"], "density": c["density"], "mode": c["mode"]},
    )
    path = _write_report(out, report)
    log.info("certified %d / %d points; report %s", certified, len(reports), path)
    return 0 if report.certified else 1


def cmd_certify_controller(cfg, threads):
    out = _out_dir(cfg)
    model = _load_model(cfg, ControllerModel)
    c = cfg["certify"]
    loop = ClosedLoop.segway(model.controller)
    V = Quadratic(model.P)
    domain = _domain(cfg)
    if "level" in c:
        level = c["level"]
        report = certify_invariant_set(loop, V, level, domain, c["grid_spacing"], threads=threads)
    else:
        level, report = search_level(loop, V, domain, c["grid_spacing"], threads=threads)
    if report is None:
        report = CertificationReport("Failed", "ViolatedBox", details={"note": "no level produced samples"})
    if report.certified:
        model.level = level
        serialize_model(model, _model_path(cfg))
    path = _write_report(out, report)
    log.info("controller certification %s at level %s; report %s", report.verdict, level, path)
    return 0 if report.certified else 1


def _uniform_in_ellipsoid(rng, P, level, count):
    n = P.shape[0]
    u = rng.standard_normal((count, n))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    rad = rng.random(count) ** (1.0 / n)
    R = np.linalg.cholesky(P)
    return np.linalg.solve(R.T, (u * (np.sqrt(level) * rad)[:, None]).T).T


def cmd_rollout(cfg, threads):
    out = _out_dir(cfg)
    path = _model_path(cfg)
    if not path.exists():
        raise UsageError(f"model file {path} not found")
    model = deserialize_model(path)
    r = cfg["rollout"]
    tdir = out / "trajectories"
    tdir.mkdir(exist_ok=True)
    if isinstance(model, ClassifierModel):
        if "inputs" in r:
            X = np.asarray(r["inputs"], dtype=float)
        else:
            _, (Xt, _) = _datasets(cfg)
            X = Xt[: min(r["count"], 10)]
        E0 = np.tile(uniform_point(model.n), (X.shape[0], 1))
        traj = rollout(FilteredDynamics(model.net, X, model.alpha), E0, model.integrator, simplex=True)
        for i in range(X.shape[0]):
            traj.to_csv(tdir / f"rollout_{i:03d}.csv", prefix="eta", index=i)
        log.info("wrote %d classifier trajectories", X.shape[0])
        return 0
    if model.level is None:
        raise UsageError("controller model has no certified level; run certify-controller first")
    rng = np.random.default_rng(cfg["seed"])
    X0 = _uniform_in_ellipsoid(rng, model.P, model.level, r["count"])
    loop = ClosedLoop.segway(model.controller)
    traj = rollout(loop, X0, IntegratorConfig("rk4", r["dt"], r["horizon"]))
    V = np.einsum("tbi,ij,tbj->tb", traj.states, model.P, traj.states)
    with open(out / "v_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"V_{i}" for i in range(V.shape[1])])
        for t, row in zip(traj.times, V):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
    for i in range(min(X0.shape[0], 10)):
        Trajectory(traj.times, traj.states[:, i]).to_csv(tdir / f"rollout_{i:03d}.csv", prefix="x")
    exits = int(np.any(V > model.level, axis=0).sum())
    (out / "rollout_summary.json").write_text(json.dumps(
        {"level": model.level, "trajectories": int(V.shape[1]), "exits": exits,
         "horizon": r["horizon"], "dt": r["dt"]}, indent=2))
    log.info("%d of %d trajectories left the sublevel set", exits, V.shape[1])
    return 0


def cmd_sample(cfg, threads):
    out = _out_dir(cfg)
    s = cfg["sample"]
    if s.get("label") is None:
        pts = sample_simplex_grid(s["n"], s["density"]).points
    else:
        pts = sample_decision_boundary(s["n"], s["density"], s["label"]).points
    sidecar = write_sample_set(out / "samples.bin", pts, s["n"], s["density"], s.get("label"))
    log.info("wrote %d samples (%s)", pts.shape[0], sidecar)
    return 0


def cmd_export_plots(cfg, threads):
    out = Path(cfg["output_dir"])
    if not out.is_dir():
        raise UsageError(f"run directory {out} does not exist")
    written = []
    tdir = out / "trajectories"
    rows = sorted(tdir.glob("rollout_*.csv")) if tdir.is_dir() else []
    eta_files = [p for p in rows if p.read_text().split("\n", 1)[0].startswith("t,eta_")]
    if eta_files:
        dest = out / "fig3_trajectories.csv"
        with open(dest, "w", newline="") as fh:
            w = csv.writer(fh)
            header = None
            for k, p in enumerate(eta_files):
                with open(p, newline="") as src:
                    rd = csv.reader(src)
                    h = next(rd)
                    if header is None:
                        header = ["trajectory"] + h
                        w.writerow(header)
                    for row in rd:
                        w.writerow([k] + row)
        written.append(dest)
    model_path = _model_path(cfg)
    if model_path.exists():
        model = deserialize_model(model_path)
        if isinstance(model, ControllerModel):
            loop = ClosedLoop.segway(model.controller)
            lo, hi = cfg["certify"]["domain"]
            axis = np.linspace(lo, hi, 101)
            dest = out / "fig6a_vdot_grid.csv"
            write_vdot_grid_csv(dest, vdot_grid(loop, model.P, axis, axis, v=0.0))
            written.append(dest)
    if (out / "v_curves.csv").exists():
        dest = out / "fig6b_v_curves.csv"
        dest.write_text((out / "v_curves.csv").read_text())
        written.append(dest)
    if not written:
        raise UsageError(f"no rollout or model artifacts in {out}")
    log.info("exported %s", ", ".join(p.name for p in written))
    return 0


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-controller": cmd_train_controller,
    "certify-classifier": cmd_certify_classifier,
    "certify-controller": cmd_certify_controller,
    "rollout": cmd_rollout,
    "sample": cmd_sample,
    "export-plots": cmd_export_plots,
}


def build_parser():
    p = argparse.ArgumentParser(prog="fiode", description="Train and certify forward-invariant neural ODEs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration (see config_schema.json)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--model", help="model file (overrides model_path)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, {"output_dir": args.out, "model_path": args.model})
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        log.info("command %s, seed %d, threads %d", args.command, cfg["seed"], args.threads)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        return HANDLERS[args.command](cfg, args.threads)
    except UsageError as e:
        log.error("%s", e)
        return 2
    except (ParseError, OSError) as e:
        log.error("%s", e)
        return 2
    except FiodeError as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
