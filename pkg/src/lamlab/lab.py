"""Scenario files, experiment orchestration and persisted outputs.

A scenario is a TOML file.  ``load_scenario`` validates it and applies
defaults; ``run_scenario`` runs mesh, solve and diagnostics (and a gap sweep
when one is configured) and writes one directory of outputs.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .diagnostics import (
    NeckProblem,
    campanato_decay,
    directional_derivative_field,
    gap_sweep,
    piecewise_norm_table,
)
from .fields import ConstantField, make_field, scalar_matrix
from .geometry import (
    DEFAULT_SEED,
    InterfaceStack,
    cosine,
    flat,
    geometry_selftest,
    neck_stack,
    parabola,
    Polynomial,
)
from .manufactured import ManufacturedProblem, convergence_rates
from .mesh import SIDES, MeshParams, StripMesh, build_strip_mesh, mesh_quality
from .solver import (
    CoefficientModel,
    FieldSolution,
    ForcingModel,
    interface_flux_jump,
    solve_on_mesh,
    solve_parabolic,
)

log = logging.getLogger(__name__)

DECAY_COLUMNS = ["z0_t", "z0_x", "z0_y", "r", "phi"]
SOLUTION_COLUMNS = ["node", "x", "y", "t", "u"]


class ValidationError(ValueError):
    """Invalid scenario; ``key`` names the offending entry."""

    def __init__(self, key: str, detail: str = ""):
        self.key = key
        super().__init__(key if not detail else f"{key}: {detail}")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScenarioConfig:
    mode: str
    stack: InterfaceStack
    raw: dict
    mesh: MeshParams
    name: str = "scenario"
    seed: int = DEFAULT_SEED
    rel_tol: float = 1e-12
    max_iter: int | None = None
    delta: float = 0.75
    mu: float = 1.0
    source: str = ""

    @property
    def mu_prime(self) -> float:
        return min(0.5, self.mu)

    def section(self, key: str) -> dict:
        return self.raw.get(key, {}) or {}

    @property
    def scenario_hash(self) -> str:
        return scenario_hash(self.raw)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        cfg = ScenarioConfig(**{**self.__dict__})
        cfg.seed = int(seed)
        return cfg


def scenario_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def _interface_from_spec(spec, key: str):
    if isinstance(spec, (int, float)):
        return flat(float(spec))
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError(key, "expected a number or a table with 'kind'")
    kind = spec["kind"]
    try:
        if kind == "flat":
            return flat(float(spec.get("c", 0.0)))
        if kind == "parabola":
            return parabola(float(spec.get("a", 0.0)), float(spec.get("b", 0.0)), float(spec.get("c", 0.0)))
        if kind == "cosine":
            return cosine(float(spec["A"]), float(spec["omega"]), float(spec.get("phi", 0.0)),
                          float(spec.get("offset", 0.0)))
        if kind == "polynomial":
            return Polynomial([float(c) for c in spec["coeffs"]])
    except KeyError as exc:
        raise ValidationError(f"{key}.{exc.args[0]}", "missing") from None
    raise ValidationError(f"{key}.kind", f"unknown interface kind {kind!r}")


def build_stack(section: dict, eps: float | None = None) -> InterfaceStack:
    """Interface stack from an ``[interfaces]`` table (``eps`` overrides the gap)."""
    preset = section.get("preset")
    if preset == "neck":
        e = float(section.get("eps", 0.05) if eps is None else eps)
        if not e > 0:
            raise ValidationError("interfaces.eps", "gap must be positive")
        return neck_stack(e)
    if preset not in (None, "list"):
        raise ValidationError("interfaces.preset", f"unknown preset {preset!r}")
    items = section.get("h", [])
    if not isinstance(items, list):
        raise ValidationError("interfaces.h", "expected an array")
    return InterfaceStack([_interface_from_spec(s, f"interfaces.h[{i}]") for i, s in enumerate(items)])


def _number(section: dict, key: str, default, prefix: str, cast=float):
    val = section.get(key, default)
    try:
        return cast(val) if val is not None else None
    except (TypeError, ValueError):
        raise ValidationError(f"{prefix}.{key}", f"invalid value {val!r}") from None


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a TOML scenario, applying defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError("file", str(exc)) from None
    return parse_scenario(text)


def parse_scenario(text: str) -> ScenarioConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError("toml", str(exc)) from None
    mode = raw.get("mode", "elliptic")
    if mode not in ("elliptic", "parabolic"):
        raise ValidationError("mode", f"expected 'elliptic' or 'parabolic', got {mode!r}")
    if "interfaces" not in raw:
        raise ValidationError("interfaces")
    stack = build_stack(raw["interfaces"])
    m = raw.get("mesh", {})
    try:
        mesh = MeshParams(
            nx=_number(m, "nx", 64, "mesh", int),
            ny=_number(m, "ny", 8, "mesh", int),
            eta_min=_number(m, "eta_min", 1e-12, "mesh"),
            dirichlet=tuple(raw.get("boundary", {}).get("sides", SIDES)),
        )
    except ValueError as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError("mesh", str(exc)) from None
    if set(mesh.dirichlet) - set(SIDES):
        raise ValidationError("boundary.sides", f"unknown side in {list(mesh.dirichlet)}")
    d = raw.get("diagnostics", {})
    s = raw.get("solver", {})
    cfg = ScenarioConfig(
        mode=mode,
        stack=stack,
        raw=raw,
        mesh=mesh,
        name=str(raw.get("name", "scenario")),
        seed=_number(raw, "seed", DEFAULT_SEED, "scenario", int),
        rel_tol=_number(s, "rel_tol", 1e-12, "solver"),
        max_iter=_number(s, "max_iter", None, "solver", int),
        delta=_number(d, "delta", 0.75, "diagnostics"),
        mu=_number(d, "mu", 1.0, "diagnostics"),
        source=text,
    )
    if not 0.5 < cfg.delta < 1.0:
        raise ValidationError("diagnostics.delta", "must lie in (1/2, 1)")
    if not 0.0 < cfg.mu <= 1.0:
        raise ValidationError("diagnostics.mu", "must lie in (0, 1]")
    if not cfg.rel_tol > 0:
        raise ValidationError("solver.rel_tol", "must be positive")
    if mode == "parabolic":
        tsec = raw.get("time")
        if not tsec:
            raise ValidationError("time", "parabolic mode needs a [time] table")
        if _number(tsec, "steps", 0, "time", int) < 1:
            raise ValidationError("time.steps", "need at least one step")
        if not _number(tsec, "t1", 0.0, "time") > _number(tsec, "t0", -1.0, "time"):
            raise ValidationError("time", "t1 must exceed t0")
    # build data once so that bad expressions fail at load time
    build_problem(cfg, stack)
    return cfg


# ---------------------------------------------------------------------------
# problem construction


def contrast_values(m: int, a0: float) -> list[float]:
    """``a0`` on regions ``j`` with ``m + 1 - j`` even, 1 elsewhere."""
    return [a0 if (m + 1 - j) % 2 == 0 else 1.0 for j in range(1, m + 2)]


def _coefficient_field(spec, key):
    try:
        arr = np.array(spec, dtype=object)
        if arr.shape == ():
            return scalar_matrix(spec)
        return make_field(spec, (2, 2))
    except (ValueError, TypeError, SyntaxError, AttributeError) as exc:
        raise ValidationError(key, str(exc)) from None


def _default_nu(fields) -> float:
    lo = 1.0
    for f in fields:
        if not isinstance(f, ConstantField):
            return 1e-3
        ev = np.linalg.eigvalsh(0.5 * (f.const + f.const.T))
        nrm = np.linalg.norm(f.const, 2)
        lo = min(lo, float(ev.min()), 1.0 / float(nrm))
    return 0.999 * lo if lo > 0 else 1e-3


@dataclass
class Problem:
    stack: InterfaceStack
    coeff: CoefficientModel
    forcing: ForcingModel
    manufactured: ManufacturedProblem | None = None
    restrict_region: int | None = None


def build_problem(cfg: ScenarioConfig, stack: InterfaceStack, a0: float | None = None) -> Problem:
    raw = cfg.raw
    m = stack.m
    csec = raw.get("coefficients", {})
    if a0 is not None:
        specs = contrast_values(m, a0)
    elif "regions" in csec:
        specs = csec["regions"]
        if not isinstance(specs, list) or len(specs) != m + 1:
            raise ValidationError("coefficients.regions", f"expected {m + 1} entries")
    else:
        specs = contrast_values(m, float(csec.get("a0", 1.0)))
    fsec = raw.get("forcing", {})
    preset = fsec.get("preset", "zero")
    bsec = raw.get("boundary", {})
    man = None
    if preset == "manufactured":
        u = fsec.get("u")
        if not isinstance(u, list) or len(u) != m + 1:
            raise ValidationError("forcing.u", f"expected {m + 1} expressions")
        if any(isinstance(s, list) for s in specs):
            raise ValidationError("coefficients.regions", "manufactured data need scalar coefficients")
        try:
            man = ManufacturedProblem(stack, u, specs, parabolic=cfg.mode == "parabolic",
                                      nu=float(csec.get("nu", 0.0)) or 1e-3)
        except (ValueError, TypeError, SyntaxError) as exc:
            raise ValidationError("forcing.u", str(exc)) from None
        coeff = man.coefficients()
        if "nu" not in csec:
            coeff.nu = _default_nu(coeff.regions)
        forcing = man.forcing()
    elif preset in ("zero", "expression"):
        fields = [_coefficient_field(s, f"coefficients.regions[{i}]") for i, s in enumerate(specs)]
        nu = float(csec["nu"]) if "nu" in csec else _default_nu(fields)
        try:
            coeff = CoefficientModel(fields, nu=nu)
        except ValueError as exc:
            raise ValidationError("coefficients.nu", str(exc)) from None
        if preset == "zero":
            parts = [ConstantField([0.0, 0.0])] * (m + 1)
        else:
            fs = fsec.get("f")
            if not isinstance(fs, list) or len(fs) != m + 1:
                raise ValidationError("forcing.f", f"expected {m + 1} vector entries")
            try:
                parts = [make_field(v, (2,)) for v in fs]
            except (ValueError, TypeError, SyntaxError) as exc:
                raise ValidationError("forcing.f", str(exc)) from None
        try:
            g = make_field(bsec.get("dirichlet", 0.0))
            u0 = make_field(bsec.get("initial", bsec.get("dirichlet", 0.0)))
        except (ValueError, TypeError, SyntaxError) as exc:
            raise ValidationError("boundary.dirichlet", str(exc)) from None
        forcing = ForcingModel(parts, dirichlet=g, initial=u0)
    else:
        raise ValidationError("forcing.preset", f"unknown preset {preset!r}")
    rr = bsec.get("restrict_region")
    if rr is not None and not 1 <= int(rr) <= m + 1:
        raise ValidationError("boundary.restrict_region", f"must be in 1..{m + 1}")
    return Problem(stack, coeff, forcing, man, None if rr is None else int(rr))


def build_mesh(cfg: ScenarioConfig, problem: Problem, nx: int | None = None, ny: int | None = None) -> StripMesh:
    p = cfg.mesh
    params = MeshParams(nx=nx or p.nx, ny=ny or p.ny, eta_min=p.eta_min, dirichlet=p.dirichlet)
    mesh = build_strip_mesh(problem.stack, params)
    if problem.restrict_region is not None:
        vr = mesh.vertex_regions()
        j = problem.restrict_region
        mesh.dirichlet = np.array([v for v in mesh.dirichlet if vr[v] == {j}], dtype=np.int64)
    return mesh


def time_grid(cfg: ScenarioConfig) -> np.ndarray:
    t = cfg.raw["time"]
    return np.linspace(float(t.get("t0", -1.0)), float(t.get("t1", 0.0)), int(t["steps"]) + 1)


def solve(cfg: ScenarioConfig, problem: Problem, mesh: StripMesh) -> FieldSolution:
    if cfg.mode == "parabolic":
        return solve_parabolic(problem.stack, problem.coeff, problem.forcing, time_grid(cfg),
                               rel_tol=cfg.rel_tol, max_iter=cfg.max_iter, mesh=mesh)
    return solve_on_mesh(mesh, problem.coeff, problem.forcing, 0.0, cfg.rel_tol, cfg.max_iter)


# ---------------------------------------------------------------------------
# outputs


def _check_finite(obj, path="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"non-finite value at {path}; refusing to persist")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _check_finite(v, f"{path}[{i}]")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps_json(obj) -> str:
    obj = _plain(obj)
    _check_finite(obj)
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def dumps_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        row = _plain(list(row))
        _check_finite(row, "csv")
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} values for {len(columns)} columns")
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


@dataclass
class Artifacts:
    """Everything a run may persist; ``None`` entries are skipped."""

    report: dict = field(default_factory=dict)
    mesh: StripMesh | None = None
    solution: FieldSolution | None = None
    decay: list | None = None  # rows (t, x, y, r, phi)
    sweep: tuple | None = None  # (columns, rows)
    extra_csv: dict = field(default_factory=dict)
    scenario_text: str | None = None


def solution_rows(sol: FieldSolution):
    V = sol.mesh.vertices
    for k, t in enumerate(sol.times):
        for i in range(len(V)):
            yield (i, float(V[i, 0]), float(V[i, 1]), float(t), float(sol.values[k, i]))


def emit_outputs(art: Artifacts, out_dir) -> list[Path]:
    """Write artifacts; every file is fully validated before anything is written."""
    out = Path(out_dir)
    files: dict[str, str] = {}
    if art.mesh is not None:
        files["mesh.json"] = dumps_json(art.mesh.to_json())
    if art.solution is not None:
        files["solution.csv"] = dumps_csv(SOLUTION_COLUMNS, solution_rows(art.solution))
    if art.decay is not None:
        files["decay.csv"] = dumps_csv(DECAY_COLUMNS, art.decay)
    if art.sweep is not None:
        files["sweep.csv"] = dumps_csv(*art.sweep)
    for name, (cols, rows) in art.extra_csv.items():
        files[name] = dumps_csv(cols, rows)
    files["report.json"] = dumps_json(art.report)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        written.append(p)
    if art.scenario_text is not None:
        p = out / "scenario.toml"
        p.write_text(art.scenario_text)
        written.append(p)
    return written


@dataclass
class RunManifest:
    scenario_hash: str
    version: str
    seed: int
    out_dir: str
    timings: dict
    files: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def prepare_out_dir(out_dir, force: bool = False) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# phases


class Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Phase:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + time.perf_counter() - self.t0
                return False

        return _Phase()


def provenance(cfg: ScenarioConfig) -> dict:
    return {
        "scenario_hash": cfg.scenario_hash,
        "version": __version__,
        "seed": cfg.seed,
        "name": cfg.name,
        "mode": cfg.mode,
        "mesh": cfg.mesh.as_dict(),
        "rel_tol": cfg.rel_tol,
        "delta": cfg.delta,
        "mu": cfg.mu,
        "mu_prime": cfg.mu_prime,
    }


def solver_block(sol: FieldSolution) -> dict:
    meta = sol.meta
    return {
        "iterations": meta["iterations"],
        "residual": meta["residual"],
        "rel_tol": meta["rel_tol"],
        "unknowns": meta["unknowns"],
        "clamp_warnings": meta["clamped_cells"],
    }


def default_probes(stack: InterfaceStack) -> list[list[float]]:
    if stack.m == 0:
        return [[0.0, 0.0]]
    H = stack.heights(np.zeros((1, 1)))[:, 0]
    B = np.concatenate([[-1.0], H, [1.0]])
    probes = []
    for j in range(1, stack.m + 1):
        off = min(0.02, 0.25 * (B[j + 1] - B[j]))
        probes.append([0.0, float(H[j - 1] + off)])
    return probes


def interface_flux_summary(fj, m: int) -> list[dict]:
    out = []
    for j in range(1, m + 1):
        sel = fj.interface == j
        if not np.any(sel):
            continue
        out.append({
            "interface": j,
            "flux_mean": float(np.mean(0.5 * (fj.lower[sel] + fj.upper[sel]))),
            "flux_min": float(min(fj.lower[sel].min(), fj.upper[sel].min())),
            "flux_max": float(max(fj.lower[sel].max(), fj.upper[sel].max())),
            "jump_sup": float(np.max(np.abs(fj.jump[sel]))),
        })
    return out


def diagnose(cfg: ScenarioConfig, problem: Problem, sol: FieldSolution, timer: Timer):
    """Diagnostics block for the report and the decay rows."""
    d = cfg.section("diagnostics")
    report: dict = {}
    mesh = sol.mesh
    with timer("flux"):
        fj = interface_flux_jump(mesh, sol, problem.coeff, problem.forcing, problem.stack)
        report["flux_jump_sup"] = fj.sup
        report["interface_flux"] = interface_flux_summary(fj, problem.stack.m)
    if problem.manufactured is not None:
        with timer("errors"):
            report["errors_vs_exact"] = problem.manufactured.errors(sol)
    budget = int(d.get("budget", 300))
    with timer("norms"):
        margin = float(d.get("margin", 0.05))
        inside = lambda p: np.all(np.abs(np.atleast_2d(p)) <= 1.0 - margin, axis=1)  # noqa: E731
        report["regularity"] = piecewise_norm_table(
            sol, problem.stack, 1, cfg.mu_prime, cfg.delta, inside, budget, cfg.seed
        )
    probes = d.get("probes", default_probes(problem.stack))
    radii = [float(r) for r in d.get("radii", [0.2, 0.1, 0.05, 0.02])]
    rows, fits = [], []
    fields = directional_derivative_field(sol, problem.stack, problem.coeff, problem.forcing)
    t0 = float(sol.times[-1])
    with timer("campanato"):
        for p in probes:
            z0 = (t0, np.asarray(p, dtype=float))
            rec, fit = campanato_decay(fields, z0, radii, int(d.get("phi_budget", 1500)))
            rows += [(t0, float(p[0]), float(p[1]), r, phi) for r, phi in rec]
            fits.append({"z0": [t0, float(p[0]), float(p[1])], "exponent": fit.exponent,
                         "intercept": fit.intercept, "dropped": fit.dropped})
    report["campanato"] = fits
    report["frame_jumps"] = fields.interface_jumps()
    return report, rows


def neck_template(cfg: ScenarioConfig, a0: float, nx: int | None = None, ny: int | None = None):
    """``eps -> NeckProblem`` using the scenario's mesh, boundary and solver settings."""

    def build(eps: float) -> NeckProblem:
        stack = build_stack({**cfg.raw["interfaces"], "preset": "neck"}, eps)
        prob = build_problem(cfg, stack, a0)
        mesh = build_mesh(cfg, prob, nx, ny)
        sol = solve_on_mesh(mesh, prob.coeff, prob.forcing, 0.0, cfg.rel_tol, cfg.max_iter)
        return NeckProblem(eps, stack, prob.coeff, prob.forcing, sol)

    return build


def sweep_columns(m: int) -> list[str]:
    return ["eps", "a0", "sup_Du"] + [f"sup_D2u_region{j}" for j in range(1, m + 2)] + ["seminorm_Du", "phi_exponent"]


def run_sweep(cfg: ScenarioConfig, timer: Timer):
    sw = cfg.raw.get("sweep")
    if not sw:
        raise ValidationError("sweep", "scenario has no [sweep] table")
    if sw.get("parameter", "eps") != "eps":
        raise ValidationError("sweep.parameter", "only 'eps' sweeps are supported")
    if cfg.raw["interfaces"].get("preset") != "neck":
        raise ValidationError("interfaces.preset", "gap sweeps need the 'neck' preset")
    values = [float(v) for v in sw.get("values", [])]
    if len(values) < 2:
        raise ValidationError("sweep.values", "need at least two gap values")
    a0s = sw.get("a0", cfg.raw.get("coefficients", {}).get("a0", 1.0))
    a0s = [float(a) for a in (a0s if isinstance(a0s, list) else [a0s])]
    window = sw.get("window", "neck")
    if window != "neck":
        window = float(window)
    radii = [float(r) for r in sw.get("radii", [0.2, 0.1, 0.05, 0.02])]
    rows, tables, errors = [], [], []
    m = 2
    with timer("sweep"):
        for a0 in a0s:
            tab = gap_sweep(neck_template(cfg, a0), values, a0, window,
                            int(sw.get("budget", 300)), radii, cfg.seed)
            tables.append({"a0": a0, "p1": tab.p1, "p2": tab.p2, "window": tab.window,
                           "iterations": [r.iterations for r in tab.rows if r.error is None]})
            for r in tab.rows:
                if r.error is not None:
                    errors.append({"phase": "sweep", "eps": r.eps, "a0": a0, "message": r.error})
                    continue
                rows.append([r.eps, a0, r.sup_Du, *r.sup_D2u, r.seminorm_Du, r.phi_exponent])
    return (sweep_columns(m), rows), tables, errors


def run_scenario(cfg: ScenarioConfig, out_dir, force: bool = False, phases=("mesh", "solve", "diagnose", "sweep")) -> RunManifest:
    """Run the configured pipeline and write its outputs.

    ``phases`` selects a prefix of the pipeline (the CLI subcommands map to
    these).  Errors are recorded in ``report.json`` under ``"errors"``.
    """
    out = prepare_out_dir(out_dir, force)
    timer = Timer()
    art = Artifacts(scenario_text=cfg.source)
    report: dict = {"provenance": provenance(cfg), "errors": []}
    try:
        problem = build_problem(cfg, cfg.stack)
        if "mesh" in phases:
            with timer("mesh"):
                mesh = build_mesh(cfg, problem)
            art.mesh = mesh
            report["mesh"] = mesh_quality(mesh).as_dict()
        if "solve" in phases:
            with timer("solve"):
                sol = solve(cfg, problem, mesh)
            art.solution = sol
            report["solver"] = solver_block(sol)
        if "diagnose" in phases:
            diag, rows = diagnose(cfg, problem, sol, timer)
            report["diagnostics"] = diag
            art.decay = rows
        if "sweep" in phases and cfg.raw.get("sweep"):
            art.sweep, tables, errs = run_sweep(cfg, timer)
            report["sweep"] = tables
            report["errors"] += errs
    except Exception as exc:
        report["errors"].append({"phase": "run", "type": type(exc).__name__, "message": str(exc)})
        art.report = {**report, "timings": timer.timings}
        _safe_emit(art, out)
        raise
    art.report = {**report, "timings": timer.timings}
    files = emit_outputs(art, out)
    return RunManifest(cfg.scenario_hash, __version__, cfg.seed, str(out), timer.timings,
                       [p.name for p in files], report["errors"])


def _safe_emit(art: Artifacts, out: Path) -> None:
    """Best effort: persist what is finite so the failure is on record."""
    for attempt in (art, Artifacts(report=art.report, scenario_text=art.scenario_text)):
        try:
            emit_outputs(attempt, out)
            return
        except ValueError:
            continue
    (out / "report.json").write_text(json.dumps({"errors": art.report.get("errors", [])}, indent=2) + "\n")


def run_geometry(cfg: ScenarioConfig, out_dir, force: bool = False) -> RunManifest:
    """Frame-field self test on the scenario's stack (or the neck family)."""
    out = prepare_out_dir(out_dir, force)
    timer = Timer()
    g = cfg.section("geometry")
    budget = int(g.get("budget", 10_000))
    with timer("geometry"):
        if cfg.raw["interfaces"].get("preset") == "neck":
            eps_list = g.get("eps", (cfg.raw.get("sweep") or {}).get("values")) or [
                float(cfg.raw["interfaces"].get("eps", 0.05))]
            reps = geometry_selftest(lambda e: neck_stack(e), budget, [float(e) for e in eps_list], cfg.seed)
        else:
            reps = geometry_selftest(cfg.stack, budget, seed=cfg.seed)
    report = {"provenance": provenance(cfg), "errors": [], "geometry": [r.as_dict() for r in reps],
              "timings": timer.timings}
    files = emit_outputs(Artifacts(report=report, scenario_text=cfg.source), out)
    return RunManifest(cfg.scenario_hash, __version__, cfg.seed, str(out), timer.timings, [p.name for p in files])


def run_convergence(cfg: ScenarioConfig, out_dir, refine: int = 4, force: bool = False) -> RunManifest:
    """Refinement study from the scenario mesh: ``nx * 2^k`` for ``k < refine``."""
    if refine < 2:
        raise ValidationError("refine", "need at least two refinement levels")
    out = prepare_out_dir(out_dir, force)
    timer = Timer()
    problem = build_problem(cfg, cfg.stack)
    rows, hs, l2, en, fx = [], [], [], [], []
    with timer("convergence"):
        for k in range(refine):
            nx, ny = cfg.mesh.nx * 2**k, cfg.mesh.ny * 2**k
            mesh = build_mesh(cfg, problem, nx, ny)
            sol = solve(cfg, problem, mesh)
            jump = interface_flux_jump(mesh, sol, problem.coeff, problem.forcing, problem.stack).sup
            err = problem.manufactured.errors(sol) if problem.manufactured else None
            h = 2.0 / nx
            hs.append(h)
            fx.append(jump)
            if err:
                l2.append(err["l2"])
                en.append(err["energy"])
            rows.append([nx, ny, h, err["l2"] if err else 0.0, err["energy"] if err else 0.0, jump,
                         int(sum(sol.meta["iterations"]))])
    rates = {}
    if l2:
        rates["l2"] = convergence_rates(hs, l2)
        rates["energy"] = convergence_rates(hs, en)
    if stack_has_interfaces(problem.stack) and min(fx) > 0:
        rates["flux_jump"] = convergence_rates(hs, fx)
    report = {"provenance": provenance(cfg), "errors": [], "convergence": {"rates": rates},
              "timings": timer.timings}
    cols = ["nx", "ny", "h", "l2_error", "energy_error", "flux_jump_sup", "iterations"]
    art = Artifacts(report=report, extra_csv={"convergence.csv": (cols, rows)}, scenario_text=cfg.source)
    files = emit_outputs(art, out)
    return RunManifest(cfg.scenario_hash, __version__, cfg.seed, str(out), timer.timings, [p.name for p in files])


def stack_has_interfaces(stack: InterfaceStack) -> bool:
    return stack.m > 0
