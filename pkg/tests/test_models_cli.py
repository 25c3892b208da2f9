import csv
import json

import numpy as np
import pytest

from fiode import cli
from fiode.errors import ParseError
from fiode.models import (ClassifierModel, ControllerModel, deserialize_model, serialize_model,
                          zero_classifier)
from fiode.network import ControllerNet
from fiode.simplex import uniform_point
from verify_helpers import MEANS, gradient_flow_model


def run(tmp_path, command, config=None, **flags):
    flags.setdefault("threads", 1)
    args = [command, "--out", str(tmp_path / "run")]
    if config is not None:
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config))
        args += ["--config", str(path)]
    for k, v in flags.items():
        args += [f"--{k}", str(v)]
    return cli.main(args)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------

@pytest.mark.parametrize("orthogonal", [True, False])
def test_classifier_round_trip(tmp_path, rng, orthogonal):
    m = ClassifierModel.init(rng, 4, 3, hidden=12, orthogonal=orthogonal, kappa=0.37, potential="mll")
    serialize_model(m, tmp_path / "m.json")
    back = deserialize_model(tmp_path / "m.json")
    E = rng.dirichlet(np.ones(4), size=100)
    X = rng.normal(size=(100, 3))
    assert np.array_equal(back.net.forward(E, X), m.net.forward(E, X))
    assert back.kappa == m.kappa and back.potential == "mll" and back.alpha == m.alpha
    assert back.integrator == m.integrator


def test_controller_round_trip(tmp_path, rng):
    m = ControllerModel(ControllerNet.init(rng, hidden=8), np.diag([1.0, 2.0, 3.0]) + 0.1, level=0.0625)
    serialize_model(m, tmp_path / "c.json")
    back = deserialize_model(tmp_path / "c.json")
    X = rng.normal(size=(100, 3))
    assert np.array_equal(back.controller.forward(X), m.controller.forward(X))
    assert np.array_equal(back.P, m.P) and back.level == 0.0625


def test_truncated_file_is_parse_error(tmp_path, rng):
    path = tmp_path / "m.json"
    serialize_model(ClassifierModel.init(rng, 3, 2, hidden=4), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ParseError) as exc:
        deserialize_model(path)
    assert 0 < exc.value.offset <= len(raw) // 2


def test_unknown_layer_type_is_named(tmp_path, rng):
    path = tmp_path / "m.json"
    serialize_model(ClassifierModel.init(rng, 3, 2, hidden=4), path)
    d = json.loads(path.read_text())
    d["layers"][1]["type"] = "sigmoid_gate"
    path.write_text(json.dumps(d))
    with pytest.raises(ParseError, match="sigmoid_gate"):
        deserialize_model(path)


# --------------------------------------------------------------------------
# command line
# --------------------------------------------------------------------------

def test_sample_count(tmp_path):
    assert run(tmp_path, "sample", {"sample": {"n": 3, "density": 2}}) == 0
    meta = json.loads(next((tmp_path / "run").glob("*.json")).read_text())
    assert meta["count"] == 6


def test_schema_violation_exit_code(tmp_path, caplog):
    assert run(tmp_path, "sample", {"sample": {"n": 3, "bogus": 1}}) == 2
    assert "sample.bogus" in caplog.text
    assert run(tmp_path, "sample", {"certify": {"mode": "exact"}}) == 2
    assert "certify.mode" in caplog.text


def test_malformed_config_and_missing_model(tmp_path):
    (tmp_path / "config.json").write_text("{not json")
    assert cli.main(["sample", "--config", str(tmp_path / "config.json")]) == 2
    assert run(tmp_path, "certify-classifier", model=tmp_path / "absent.json") == 2


def test_insufficient_kappa_exit_code(tmp_path):
    m = ClassifierModel.init(np.random.default_rng(0), 3, 2, hidden=8, orthogonal=True, kappa=0.1)
    serialize_model(m, tmp_path / "m.json")
    cfg = {"certify": {"eps": 0.1, "potential": "mll", "density": 6, "inputs": [[0.0, 0.0]], "labels": [0]}}
    assert run(tmp_path, "certify-classifier", cfg, model=tmp_path / "m.json") == 1
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    assert rep["verdict"] == "Failed" and rep["reason"] == "InsufficientKappa"


def test_certified_report_is_reproducible(tmp_path):
    serialize_model(gradient_flow_model(), tmp_path / "m.json")
    cfg = {"certify": {"eps": 0.05, "inputs": MEANS.tolist(), "labels": [0, 1, 2]}}
    texts = []
    for threads in ("1", "2"):
        assert run(tmp_path, "certify-classifier", cfg, model=tmp_path / "m.json", threads=threads) == 0
        d = json.loads((tmp_path / "run" / "report.json").read_text())
        assert d["verdict"] == "Certified" and d["details"]["certified_fraction"] == 1.0
        d.pop("elapsed_s")
        texts.append(json.dumps(d, sort_keys=True))
    assert texts[0] == texts[1]


def test_zero_model_rollout_stays_uniform(tmp_path):
    serialize_model(zero_classifier(3, 2), tmp_path / "m.json")
    cfg = {"rollout": {"inputs": [[0.3, -1.0], [2.0, 0.5]]}}
    assert run(tmp_path, "rollout", cfg, model=tmp_path / "m.json") == 0
    files = sorted((tmp_path / "run" / "trajectories").glob("rollout_*.csv"))
    assert len(files) == 2
    with open(files[0], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "eta_0", "eta_1", "eta_2"]
    for r in rows[1:]:
        assert [float(v) for v in r[1:]] == list(uniform_point(3))
    assert run(tmp_path, "export-plots", model=tmp_path / "m.json") == 0
    assert (tmp_path / "run" / "fig3_trajectories.csv").exists()


def test_export_plots_empty_dir(tmp_path):
    (tmp_path / "run").mkdir()
    assert run(tmp_path, "export-plots") == 2
    assert run(tmp_path, "export-plots", {"output_dir": str(tmp_path / "nowhere")}) == 2


def test_controller_export_bundles(tmp_path, rng):
    m = ControllerModel(ControllerNet.linear(np.zeros((1, 3))), np.eye(3), level=0.01)
    serialize_model(m, tmp_path / "c.json")
    cfg = {"rollout": {"count": 5, "horizon": 0.1, "dt": 0.01}}
    assert run(tmp_path, "rollout", cfg, model=tmp_path / "c.json") == 0
    assert run(tmp_path, "export-plots", model=tmp_path / "c.json") == 0
    with open(tmp_path / "run" / "fig6a_vdot_grid.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["phi", "phi_dot", "vdot"] and len(rows) == 1 + 101 * 101
    with open(tmp_path / "run" / "fig6b_v_curves.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t"] + [f"V_{i}" for i in range(5)] and len(rows) == 1 + 11
