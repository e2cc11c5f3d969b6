import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from lamlab.diagnostics import campanato_phi_values, seminorm_from_values
from lamlab.geometry import InterfaceStack, frame_field, parabola
from lamlab.mesh import MeshParams, build_strip_mesh
from lamlab.solver import solve_spd

coef = st.floats(-0.3, 0.3)


def stack_from(a1, c1, a2, gap):
    # h1 = a1 x^2 + c1 - 0.3, h2 = h1 + gap + a2 x^2 keeps the order for gap >= 0
    lo = parabola(a1, 0.0, c1 - 0.3)
    hi = parabola(a1 + abs(a2), 0.0, c1 - 0.3 + gap)
    return InterfaceStack([lo, hi])


@settings(max_examples=40, deadline=None)
@given(coef, st.floats(-0.2, 0.2), coef, st.floats(1e-4, 0.3), st.integers(0, 2**31))
def test_frames_orthonormal(a1, c1, a2, gap, seed):
    stack = stack_from(a1, c1, a2, gap)
    x = np.random.default_rng(seed).uniform(-0.99, 0.99, size=(200, 2))
    ff = frame_field(stack, x)
    ell, n = ff.tangents[:, 0], ff.normals
    assert np.max(np.abs(np.sum(ell * ell, 1) - 1)) < 1e-12
    assert np.max(np.abs(np.sum(n * n, 1) - 1)) < 1e-12
    assert np.max(np.abs(np.sum(ell * n, 1))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(coef, st.floats(-0.2, 0.2), coef, st.floats(1e-3, 0.3), st.integers(2, 12), st.integers(1, 4))
def test_mesh_areas_positive_and_conforming(a1, c1, a2, gap, nx, ny):
    mesh = build_strip_mesh(stack_from(a1, c1, a2, gap), MeshParams(nx=nx, ny=ny))
    assert np.all(mesh.areas() > 0)
    assert abs(np.sum(mesh.areas()) - 4.0) < 1e-12
    assert len(mesh.interface_edges) == 2 * nx


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-10, 10), st.floats(0.1, 10))
def test_phi_translation_and_homogeneity(seed, shift, alpha):
    rng = np.random.default_rng(seed)
    g1, g2 = rng.normal(size=200), rng.standard_cauchy(size=200)
    base = campanato_phi_values(g1, g2)
    assert np.isclose(campanato_phi_values(g1 + shift, g2 - shift), base, rtol=1e-9)
    assert np.isclose(campanato_phi_values(alpha * g1, -alpha * g2), alpha * base, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 60))
def test_seminorm_monotone(seed, k):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(80, 2))
    vals = rng.normal(size=80)
    assert seminorm_from_values(vals, pts, 0.5, grid=k, budget=0) <= seminorm_from_values(vals, pts, 0.5, grid=80, budget=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 40))
def test_cg_solves_random_spd(seed, n):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    A = B @ B.T + n * np.eye(n)
    b = rng.normal(size=n)
    x, _ = solve_spd(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)
