import csv
import json
import math

import numpy as np
import pytest

from lamlab.geometry import DEFAULT_SEED, OrderingViolation
from lamlab.lab import (
    DECAY_COLUMNS,
    Artifacts,
    ValidationError,
    contrast_values,
    dumps_json,
    emit_outputs,
    load_scenario,
    parse_scenario,
    run_scenario,
    scenario_hash,
)
from lamlab.mesh import StripMesh

MINIMAL = """mode = "elliptic"

[interfaces]
h = [0.0]

[coefficients]
a0 = 2.0
"""

TWO_LAYER = MINIMAL + """
[boundary]
sides = ["bottom", "top"]
dirichlet = "(y + 1) / 2"

[mesh]
nx = 16
ny = 4

[diagnostics]
radii = [0.2, 0.1, 0.05]
phi_budget = 600
budget = 100
"""


def write(tmp_path, text, name="s.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults(tmp_path):
    cfg = load_scenario(write(tmp_path, MINIMAL))
    assert cfg.mode == "elliptic"
    assert (cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.eta_min) == (64, 8, 1e-12)
    assert cfg.seed == DEFAULT_SEED == 0xC0FFEE
    assert (cfg.rel_tol, cfg.delta, cfg.mu, cfg.mu_prime) == (1e-12, 0.75, 1.0, 0.5)
    assert cfg.stack.m == 1


@pytest.mark.parametrize("text,key", [
    ('mode = "elliptic"\n', "interfaces"),
    ('mode = "hyperbolic"\n[interfaces]\nh = [0.0]\n', "mode"),
    (MINIMAL + "[diagnostics]\ndelta = 0.4\n", "diagnostics.delta"),
    (MINIMAL + "[diagnostics]\nmu = 0.0\n", "diagnostics.mu"),
    (MINIMAL + "[mesh]\nnx = 1\n", "mesh"),
    (MINIMAL + '[boundary]\nsides = ["front"]\n', "boundary.sides"),
    ('mode = "parabolic"\n[interfaces]\nh = [0.0]\n', "time"),
    ('[interfaces]\nh = [{ kind = "wave" }]\n', "interfaces.h[0].kind"),
    (MINIMAL + '[forcing]\npreset = "magic"\n', "forcing.preset"),
])
def test_validation_errors_name_the_key(text, key):
    with pytest.raises(ValidationError) as exc:
        parse_scenario(text)
    assert exc.value.key == key


def test_parse_error_has_line_info():
    with pytest.raises(ValidationError) as exc:
        parse_scenario('mode = "elliptic"\n[interfaces\n')
    assert exc.value.key == "toml" and "line 2" in str(exc.value)


def test_ordering_violation():
    with pytest.raises(OrderingViolation):
        parse_scenario("[interfaces]\nh = [0.5, -0.5]\n")


def test_hash_independent_of_key_order():
    a = parse_scenario(MINIMAL + "[mesh]\nnx = 8\nny = 2\n")
    b = parse_scenario('mode = "elliptic"\n[mesh]\nny = 2\nnx = 8\n[coefficients]\na0 = 2.0\n'
                       '[interfaces]\nh = [0.0]\n')
    assert a.scenario_hash == b.scenario_hash
    assert scenario_hash({"a": 1, "b": {"c": 2, "d": 3}}) == scenario_hash({"b": {"d": 3, "c": 2}, "a": 1})


def test_contrast_values():
    assert contrast_values(2, 5.0) == [5.0, 1.0, 5.0]
    assert contrast_values(1, 5.0) == [1.0, 5.0]
    assert contrast_values(0, 5.0) == [5.0]


def test_nan_is_never_persisted(tmp_path):
    with pytest.raises(ValueError):
        dumps_json({"metric": math.nan})
    with pytest.raises(ValueError):
        emit_outputs(Artifacts(report={"a": [1.0, math.inf]}), tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_empty_decay_has_header_only(tmp_path):
    emit_outputs(Artifacts(report={}, decay=[]), tmp_path)
    assert (tmp_path / "decay.csv").read_text() == ",".join(DECAY_COLUMNS) + "\n"


def test_two_layer_run(tmp_path):
    cfg = parse_scenario(TWO_LAYER)
    man = run_scenario(cfg, tmp_path / "run")
    assert man.ok
    out = tmp_path / "run"
    assert {"mesh.json", "solution.csv", "decay.csv", "report.json", "scenario.toml"} <= set(man.files)
    report = json.loads((out / "report.json").read_text())
    assert report["solver"]["residual"] <= 1e-11
    flux = report["diagnostics"]["interface_flux"][0]
    assert flux["flux_min"] == pytest.approx(2 / 3, abs=1e-9)
    assert flux["flux_max"] == pytest.approx(2 / 3, abs=1e-9)
    assert report["provenance"]["scenario_hash"] == scenario_hash(parse_scenario((out / "scenario.toml").read_text()).raw)
    mesh = StripMesh.from_json(json.loads((out / "mesh.json").read_text()))
    with open(out / "solution.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["node", "x", "y", "t", "u"]
    assert len(rows) == len(mesh.vertices)
    u = np.array([float(r["u"]) for r in rows])
    y = mesh.vertices[:, 1]
    exact = np.where(y < 0, 2 / 3 * (y + 1), 2 / 3 + y / 3)
    assert np.max(np.abs(u - exact)) < 1e-9


def test_mesh_json_round_trip(tmp_path):
    cfg = parse_scenario(TWO_LAYER)
    run_scenario(cfg, tmp_path / "m", phases=("mesh",))
    doc = json.loads((tmp_path / "m" / "mesh.json").read_text())
    again = json.loads(json.dumps(StripMesh.from_json(doc).to_json()))
    assert again["vertices"] == doc["vertices"]
    assert again["triangles"] == doc["triangles"]


def test_repeat_runs_identical(tmp_path):
    cfg = parse_scenario(TWO_LAYER)
    run_scenario(cfg, tmp_path / "a")
    run_scenario(cfg, tmp_path / "b")
    for name in ("mesh.json", "solution.csv", "decay.csv", "scenario.toml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ra = json.loads((tmp_path / "a" / "report.json").read_text())
    rb = json.loads((tmp_path / "b" / "report.json").read_text())
    ra.pop("timings"), rb.pop("timings")
    assert ra == rb


def test_no_overwrite_without_force(tmp_path):
    cfg = parse_scenario(TWO_LAYER)
    run_scenario(cfg, tmp_path / "r", phases=("mesh",))
    with pytest.raises(FileExistsError):
        run_scenario(cfg, tmp_path / "r", phases=("mesh",))
    run_scenario(cfg, tmp_path / "r", force=True, phases=("mesh",))


def test_failure_is_recorded(tmp_path):
    cfg = parse_scenario(TWO_LAYER + "\n[solver]\nmax_iter = 1\n")
    with pytest.raises(RuntimeError):
        run_scenario(cfg, tmp_path / "f")
    report = json.loads((tmp_path / "f" / "report.json").read_text())
    assert report["errors"][0]["type"] == "NonConvergence"
