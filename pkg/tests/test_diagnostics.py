import numpy as np
import pytest
import sympy as sp

from lamlab.diagnostics import (
    DiagnosticsError,
    ParabolicPoint,
    SeminormRequest,
    campanato_decay,
    campanato_phi,
    campanato_phi_values,
    corrected_flux_data,
    decay_fit,
    directional_derivative_field,
    holder_seminorm,
    neck_window,
    parabolic_distance,
    piecewise_const_project,
    piecewise_norm_table,
    seminorm_from_values,
    time_quotient,
)
from lamlab.fields import ConstantField, SymbolicField
from lamlab.geometry import InterfaceStack, flat, parabola
from lamlab.mesh import MeshParams, build_strip_mesh
from lamlab.solver import CoefficientModel, FieldSolution, ForcingModel, solve_elliptic

from oracles import layered


def nodal(mesh, fn):
    return FieldSolution(mesh, np.array([0.0]), fn(mesh.vertices)[None, :], {"iterations": [0]})


def two_layer():
    stack, coeff, forcing, _, _ = layered([0.0], [1.0, 2.0])
    sol = solve_elliptic(stack, coeff, forcing, MeshParams(nx=8, ny=4, dirichlet=("bottom", "top")))
    return stack, coeff, forcing, sol


def test_parabolic_distance():
    assert parabolic_distance((0, (0, 0)), (0, (3, 4))) == 5.0
    assert parabolic_distance((-0.25, (0, 0)), ParabolicPoint(0.0, (0, 0))) == 0.5
    assert parabolic_distance((-0.04, (0.3, 0)), (0, (0, 0))) == pytest.approx(0.3)


def test_holder_seminorm_examples():
    x = np.linspace(-1, 1, 401)
    const = SeminormRequest(lambda t, p: np.full(len(p), 3.0), x, gamma=0.5)
    assert holder_seminorm(const) == 0.0
    root = SeminormRequest(lambda t, p: np.sqrt(np.abs(p[:, 0])), x, gamma=0.5)
    assert holder_seminorm(root) == pytest.approx(1.0, abs=1e-2)
    lin = SeminormRequest(lambda t, p: p[:, 0], x, gamma=1.0, budget=100, grid=50)
    assert holder_seminorm(lin) == pytest.approx(1.0, rel=1e-14)


def test_holder_seminorm_parabolic_metric():
    t = np.linspace(-1, 0, 50)
    pts = np.zeros((50, 2))
    req = SeminormRequest(lambda tt, p: np.sqrt(np.abs(tt)), pts, gamma=1.0, metric="parabolic", times=t)
    assert holder_seminorm(req) == pytest.approx(1.0, rel=1e-12)


def test_holder_seminorm_monotone_in_pairs():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, size=(300, 2))
    vals = np.sin(3 * pts[:, 0]) * np.abs(pts[:, 1]) ** 0.3
    small = seminorm_from_values(vals, pts, 0.5, grid=40, budget=0)
    large = seminorm_from_values(vals, pts, 0.5, grid=300, budget=0)
    assert small <= large


def test_seminorm_request_validation():
    with pytest.raises(DiagnosticsError):
        SeminormRequest(lambda t, p: p, np.zeros((3, 2)), gamma=1.5)
    with pytest.raises(DiagnosticsError):
        holder_seminorm(SeminormRequest(lambda t, p: p, np.zeros((0, 2))))


def test_norm_table_piecewise_affine():
    mesh = build_strip_mesh(InterfaceStack([flat(0.0)]), MeshParams(nx=8, ny=4))
    sol = nodal(mesh, lambda v: np.abs(v[:, 1]))
    tab = piecewise_norm_table(sol, InterfaceStack([flat(0.0)]))
    for row in tab["regions"]:
        assert row["seminorm_Du"] < 1e-10
        assert row["sup_D2u"] < 1e-10
    assert tab["gradient_jump"] == pytest.approx(2.0)


def test_norm_table_quadratic_per_region():
    stack = InterfaceStack([flat(0.0)])
    mesh = build_strip_mesh(stack, MeshParams(nx=12, ny=4))
    sol = nodal(mesh, lambda v: np.where(v[:, 1] < 0, 1.0, 2.0) * v[:, 1] ** 2)
    tab = piecewise_norm_table(sol, stack)
    assert [r["sup_D2u"] for r in tab["regions"]] == pytest.approx([2.0, 4.0], abs=1e-8)


def test_norm_table_two_layer_oracle():
    stack, _, _, sol = two_layer()
    tab = piecewise_norm_table(sol, stack)
    for row in tab["regions"]:
        assert row["sup_D2u"] < 1e-8 and row["seminorm_Du"] < 1e-8


def test_directional_fields_two_layer():
    stack, coeff, forcing, sol = two_layer()
    fields = directional_derivative_field(sol, stack, coeff, forcing)
    pts = np.array([[0.1, -0.6], [-0.3, 0.4], [0.7, 0.9]])
    g1, g2 = fields.pair(0.0, pts)
    assert np.abs(g1).max() < 1e-10
    assert g2 == pytest.approx(2 / 3, abs=1e-10)
    jumps = fields.interface_jumps()
    assert jumps["tangential"] < 1e-10 and jumps["conormal"] < 1e-10


def test_directional_fields_flat_frame_consistency():
    stack = InterfaceStack([flat(-0.2), flat(0.3)])
    mesh = build_strip_mesh(stack, MeshParams(nx=8, ny=2))
    sol = nodal(mesh, lambda v: np.sin(v[:, 0]) + v[:, 1] ** 2)
    coeff = CoefficientModel([ConstantField(np.diag([1.0, 2.0 + j])) for j in range(3)], nu=0.1)
    forcing = ForcingModel([ConstantField([0.5, 0.1 * j]) for j in range(3)])
    fields = directional_derivative_field(sol, stack, coeff, forcing)
    pts = mesh.centroids()
    g1, g2 = fields.pair(0.0, pts)
    G = sol.gradients()
    reg = mesh.regions
    assert np.array_equal(g1, G[:, 0])
    assert np.array_equal(g2, (2.0 + reg - 1) * G[:, 1] - 0.1 * (reg - 1))


def test_directional_fields_detect_flux_jump():
    stack = InterfaceStack([flat(0.0)])
    mesh = build_strip_mesh(stack, MeshParams(nx=6, ny=3))
    sol = nodal(mesh, lambda v: v[:, 1])
    coeff = CoefficientModel([ConstantField(np.eye(2)), ConstantField(2.5 * np.eye(2))], nu=0.2)
    fields = directional_derivative_field(sol, stack, coeff, ForcingModel([ConstantField([0, 0])] * 2))
    assert fields.interface_jumps()["conormal"] == pytest.approx(1.5)


def test_corrected_flux_flat_constant_data():
    stack = InterfaceStack([flat(0.0)])
    mesh = build_strip_mesh(stack, MeshParams(nx=8, ny=3))
    sol = nodal(mesh, lambda v: v[:, 0] * v[:, 1] + v[:, 1])
    coeff = CoefficientModel([ConstantField(np.eye(2)), ConstantField(3 * np.eye(2))], nu=0.3)
    forcing = ForcingModel([ConstantField([0.2, 0.4]), SymbolicField(["0", "y"])])
    cf = corrected_flux_data(sol, stack, coeff, forcing, (0.0, (0.1, -0.3)))
    pts = np.array([[0.2, -0.5], [-0.4, 0.6], [0.55, 0.25]])
    assert np.abs(cf.f1(0.0, pts)).max() == 0.0
    assert np.abs(cf.h_tilde(1, [0.1, -0.3])).max() == 0.0
    assert np.abs(cf.f3(0.0, pts)).max() == 0.0


def test_h_tilde_matches_symbolic_value():
    stack = InterfaceStack([parabola(0.6, 0.1, -0.2)])
    mesh = build_strip_mesh(stack, MeshParams(nx=16, ny=3))
    p, q = 0.7, -1.3
    sol = nodal(mesh, lambda v: p * v[:, 0] + q * v[:, 1])
    a = [1.0, 4.0]
    coeff = CoefficientModel([ConstantField(v * np.eye(2)) for v in a], nu=0.2)
    forcing = ForcingModel([ConstantField([0, 0])] * 2)
    cf = corrected_flux_data(sol, stack, coeff, forcing, (0.0, (0.0, -0.5)))
    x = sp.Symbol("x")
    h = 0.6 * x**2 + 0.1 * x - 0.2
    hp = sp.diff(h, x)
    n = sp.Matrix([-hp, 1]) / sp.sqrt(1 + hp**2)
    ell_x = 1 / sp.sqrt(1 + hp**2)
    xp = 0.37
    Dl_n = np.array((sp.diff(n, x) * ell_x).subs(x, xp), dtype=float).ravel()
    expected = -(a[1] - a[0]) * Dl_n @ np.array([p, q])
    assert cf.h_tilde(1, [xp])[0] == pytest.approx(expected, abs=1e-8)


def test_phi_examples():
    assert campanato_phi_values(np.full(50, 2.0), np.full(50, -1.0)) == 0.0
    r = 0.3
    y = np.linspace(-r, r, 4001)
    phi = campanato_phi_values(y, np.zeros_like(y))
    assert phi == pytest.approx(4 * r / 9, rel=0.02)
    rng = np.random.default_rng(2)
    g1, g2 = rng.normal(size=400), rng.uniform(size=400)
    base = campanato_phi_values(g1, g2)
    assert campanato_phi_values(5 * g1, 5 * g2) == pytest.approx(5 * base, rel=1e-10)
    assert campanato_phi_values(g1 + 3.0, g2 - 1.5) == pytest.approx(base, rel=1e-10)


def test_phi_decay_of_linear_field():
    sampler = lambda t, p: (p[:, 1] - 0.1, np.zeros(len(p)))  # noqa: E731
    rec = [(r, campanato_phi(sampler, (0.0, (0.0, 0.1)), r, budget=4000)) for r in (0.2, 0.1, 0.05)]
    assert decay_fit(rec).exponent == pytest.approx(1.0, abs=0.05)


def test_decay_fit():
    assert decay_fit([(0.2, 0.04), (0.1, 0.02), (0.05, 0.01)]).exponent == pytest.approx(1.0, abs=1e-12)
    c = 3.0
    fit = decay_fit([(r, c * r**0.5) for r in (0.2, 0.1, 0.05)])
    assert fit.exponent == pytest.approx(0.5, abs=1e-12)
    fit = decay_fit([(0.4, 0.0), (0.2, 0.04), (0.1, 0.02), (0.05, 0.01)])
    assert (fit.used, fit.dropped) == (3, 1)
    with pytest.raises(DiagnosticsError):
        decay_fit([(0.2, 0.04), (0.1, 0.0), (0.05, 0.01)])


def test_campanato_decay_smooth_single_region():
    stack = InterfaceStack([])
    mesh = build_strip_mesh(stack, MeshParams(nx=128, ny=128))
    sol = nodal(mesh, lambda v: np.sin(v[:, 0]) + 0.5 * v[:, 1] ** 2 + v[:, 0] * v[:, 1])
    fields = directional_derivative_field(sol, stack)
    _, fit = campanato_decay(fields, (0.0, (0.1, 0.05)), [0.2, 0.1, 0.05, 0.02])
    assert fit.exponent >= 0.9


def test_time_quotient_examples():
    pts = np.zeros((1, 2))
    for h in (0.5, 0.1, 0.01):
        assert time_quotient(lambda t, x: np.full(len(x), t), 1.0, h, [0.3], pts).sup == pytest.approx(1.0)
        tq = time_quotient(lambda t, x: np.full(len(x), t * t), 1.0, h, [0.7], pts)
        assert tq.values[0, 0] == pytest.approx(2 * 0.7 - h)
        tq = time_quotient(lambda t, x: np.full(len(x), abs(t) ** 0.75), 0.75, h, [0.0], pts)
        assert tq.sup == pytest.approx(1.0)


def test_time_quotient_linear_and_guarded():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(20, 2))
    f = lambda t, x: np.sin(t) * x[:, 0]  # noqa: E731
    g = lambda t, x: t**3 + x[:, 1]  # noqa: E731
    both = time_quotient(lambda t, x: 2 * f(t, x) - 3 * g(t, x), 0.6, 0.1, [0.2, 0.5], pts).values
    sep = 2 * time_quotient(f, 0.6, 0.1, [0.2, 0.5], pts).values - 3 * time_quotient(g, 0.6, 0.1, [0.2, 0.5], pts).values
    assert both == pytest.approx(sep, rel=1e-12, abs=1e-14)
    with pytest.raises(DiagnosticsError):
        time_quotient(f, 0.5, 0.3, [-0.8], pts, t_range=(-1.0, 0.0))
    with pytest.raises(DiagnosticsError):
        time_quotient(f, 0.5, 0.0, [0.0], pts)


def test_piecewise_const_projection():
    stack = InterfaceStack([flat(0.0)])
    proj = piecewise_const_project(lambda p: np.where(p[:, 1] > 0, 2.0, -1.0), stack, (0.1, -0.05), 0.2)
    assert proj.deviation == 0.0
    assert proj.strip_means == pytest.approx([-1.0, 2.0])
    empty = InterfaceStack([])
    devs = []
    for r in (0.2, 0.1):
        proj = piecewise_const_project(lambda p: p[:, 1], empty, (0.0, 0.0), r, budget=20000)
        assert proj.deviation == pytest.approx(4 * r / (3 * np.pi), rel=1e-2)
        devs.append(proj.deviation)
    assert devs[0] / devs[1] == pytest.approx(2.0, rel=1e-2)


def test_piecewise_const_projection_holder_field():
    stack = InterfaceStack([parabola(0.5, 0.0, -0.1)])
    x0 = np.array([0.2, -0.08])
    field = lambda p: np.sqrt(np.abs(p[:, 1] - 0.5 * p[:, 0] ** 2 + 0.1))  # noqa: E731
    rec = [(r, piecewise_const_project(field, stack, x0, r).deviation) for r in (0.2, 0.1, 0.05)]
    assert decay_fit(rec).exponent >= 0.3


def test_neck_window():
    win = neck_window(0.01)
    assert win(np.array([[0.19, 0.0], [0.21, 0.0], [0.0, 0.22], [0.0, 0.23]])).tolist() == [True, False, True, False]
    assert neck_window(0.01, 0.5)(np.array([[0.45, 0.0]]))[0]
