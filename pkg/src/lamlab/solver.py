"""P1 finite elements for divergence-form transmission problems.

Elliptic:   ``div(A grad u) = div f``
Parabolic:  ``-u_t + div(A grad u) = div f``

on an interface-fitted :class:`~lamlab.mesh.StripMesh`.  The weak form
``int A grad u . grad phi = int f . grad phi`` enforces continuity of the
conormal flux ``n . (A grad u - f)`` across interfaces without any penalty
terms.  Coefficients ``A`` and data ``f`` are given region by region.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sps
from scipy.spatial import cKDTree

from .fields import ConstantField
from .geometry import InterfaceStack, interface_normal
from .mesh import MeshParams, StripMesh, build_strip_mesh

# edge-midpoint rule, exact for quadratics on triangles
QUAD_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])


class SolverError(RuntimeError):
    pass


class EllipticityViolation(SolverError):
    def __init__(self, element: int, point, detail: str = ""):
        self.element, self.point = element, point
        super().__init__(f"ellipticity violated in element {element} at {list(point)} {detail}".strip())


class NonConvergence(SolverError):
    def __init__(self, max_iter: int, residual: float):
        self.max_iter, self.residual = max_iter, residual
        super().__init__(f"CG did not converge in {max_iter} iterations (relative residual {residual:.3e})")


class InsufficientStencil(SolverError):
    pass


@dataclass
class CoefficientModel:
    """Per-region matrix fields ``A_j(t, x)`` with ellipticity constant ``nu``."""

    regions: Sequence
    nu: float = 1e-3

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("ellipticity constant must be positive")

    @property
    def time_dependent(self) -> bool:
        return any(getattr(a, "time_dependent", False) for a in self.regions)

    def scaled(self, lam: float) -> "CoefficientModel":
        return CoefficientModel([a.scaled(lam) for a in self.regions], nu=self.nu * min(lam, 1.0 / lam))


@dataclass
class ForcingModel:
    """Per-region vector data ``f_j``, Dirichlet trace and initial datum."""

    regions: Sequence
    dirichlet: object = field(default_factory=lambda: ConstantField(0.0))
    initial: object | None = None

    @property
    def time_dependent(self) -> bool:
        return any(getattr(f, "time_dependent", False) for f in self.regions)

    def scaled(self, lam: float) -> "ForcingModel":
        return ForcingModel([f.scaled(lam) for f in self.regions], self.dirichlet, self.initial)


@dataclass
class LinearSystemSPD:
    matrix: sps.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray

    def reduced(self, fixed_values: np.ndarray):
        K = self.matrix
        Kff = K[self.free][:, self.free]
        Kfc = K[self.free][:, self.fixed]
        return Kff.tocsr(), self.rhs[self.free] - Kfc @ fixed_values


@dataclass
class FieldSolution:
    mesh: StripMesh
    times: np.ndarray
    values: np.ndarray  # (n_times, n_vertices)
    meta: dict = field(default_factory=dict)

    @property
    def parabolic(self) -> bool:
        return len(self.times) > 1

    def gradients(self, step: int = -1) -> np.ndarray:
        """Constant element gradients ``(n_elements, 2)`` for one time slab."""
        G, _ = self.mesh.gradients()
        u = self.values[step][self.mesh.triangles]
        return np.einsum("eki,ek->ei", G, u)

    def gradient_at(self, points, step: int = -1) -> tuple[np.ndarray, np.ndarray]:
        e = self.mesh.locate(points)
        if np.any(e < 0):
            raise SolverError("gradient requested outside the mesh")
        return self.gradients(step)[e], e


# ---------------------------------------------------------------------------
# assembly


def _quad_points(mesh: StripMesh) -> np.ndarray:
    p = mesh.vertices[mesh.triangles]  # (nt, 3, 2)
    return np.einsum("qk,ekd->eqd", QUAD_BARY, p)


def _per_region(mesh: StripMesh, models: Sequence, t: float, pts: np.ndarray, kind: str):
    """Evaluate region-wise fields at element quadrature points ``(nt, nq, ...)``."""
    nt, nq = pts.shape[:2]
    out = None
    for j, model in enumerate(models, start=1):
        sel = np.flatnonzero(mesh.regions == j)
        if not len(sel):
            continue
        flat = pts[sel].reshape(-1, 2)
        val = getattr(model, kind)(t, flat)
        if out is None:
            out = np.zeros((nt, nq) + val.shape[1:])
        out[sel] = val.reshape((len(sel), nq) + val.shape[1:])
    if len(models) < mesh.n_regions:
        raise SolverError(f"{len(models)} region models given for {mesh.n_regions} regions")
    return out


def _check_ellipticity(A: np.ndarray, pts: np.ndarray, nu: float) -> None:
    if not np.all(np.isfinite(A)):
        e, q = np.argwhere(~np.isfinite(A).all(axis=(2, 3)))[0]
        raise EllipticityViolation(int(e), pts[e, q], "(non-finite coefficient)")
    sym = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam = np.linalg.eigvalsh(sym)
    norm = np.linalg.norm(A, ord=2, axis=(-2, -1))
    bad = (lam[..., 0] < nu * (1 - 1e-12)) | (norm > (1 + 1e-12) / nu)
    if np.any(bad):
        e, q = np.argwhere(bad)[0]
        raise EllipticityViolation(int(e), pts[e, q], f"(eigenvalues {lam[e, q].tolist()}, nu={nu})")


def element_data(mesh: StripMesh, coeff: CoefficientModel, forcing: ForcingModel, t: float = 0.0):
    """Quadrature-averaged ``A`` and ``f`` per element (``(nt, 2, 2)``, ``(nt, 2)``)."""
    pts = _quad_points(mesh)
    A = _per_region(mesh, coeff.regions, t, pts, "value")
    _check_ellipticity(A, pts, coeff.nu)
    f = _per_region(mesh, forcing.regions, t, pts, "value")
    if not np.all(np.isfinite(f)):
        raise SolverError("non-finite forcing data")
    return A.mean(axis=1), f.mean(axis=1)


def assemble_system(mesh: StripMesh, coeff: CoefficientModel, forcing: ForcingModel, t: float = 0.0) -> LinearSystemSPD:
    G, area = mesh.gradients()
    Abar, fbar = element_data(mesh, coeff, forcing, t)
    Ke = area[:, None, None] * np.einsum("eia,eab,ejb->eij", G, Abar, G)
    Ke = 0.5 * (Ke + np.swapaxes(Ke, 1, 2))
    be = area[:, None] * np.einsum("eia,ea->ei", G, fbar)
    nv = len(mesh.vertices)
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    K = sps.coo_matrix((Ke.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()
    b = np.zeros(nv)
    np.add.at(b, tri.ravel(), be.ravel())
    fixed = np.asarray(mesh.dirichlet, dtype=np.int64)
    free = np.setdiff1d(np.arange(nv), fixed)
    return LinearSystemSPD(K, b, free, fixed)


def lumped_mass(mesh: StripMesh) -> np.ndarray:
    _, area = mesh.gradients()
    m = np.zeros(len(mesh.vertices))
    np.add.at(m, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    return m


# ---------------------------------------------------------------------------
# conjugate gradients


@dataclass
class CGInfo:
    iterations: int
    residual: float


def solve_spd(A, b: np.ndarray | None = None, rel_tol: float = 1e-12, max_iter: int | None = None, x0=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops once the true residual satisfies ``|b - A x| <= rel_tol |b|``.
    Returns ``(x, CGInfo)``.  Given a :class:`LinearSystemSPD`, the free
    block is solved with homogeneous constrained values and the full
    vector is returned.
    """
    if isinstance(A, LinearSystemSPD):
        K, rhs = A.reduced(np.zeros(len(A.fixed)))
        xf, info = solve_spd(K, rhs, rel_tol, max_iter)
        x = np.zeros(len(A.rhs))
        x[A.free] = xf
        return x, info
    b = np.asarray(b, dtype=float)
    n = len(b)
    max_iter = max_iter or max(10 * n, 1000)
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros(n), CGInfo(0, 0.0)
    diag = A.diagonal() if sps.issparse(A) else np.diag(A)
    if np.any(diag <= 0):
        raise SolverError("matrix has a non-positive diagonal entry")
    dinv = 1.0 / diag
    tol = rel_tol * bnorm
    r = b - A @ x
    if np.linalg.norm(r) <= tol:
        return x, CGInfo(0, float(np.linalg.norm(r) / bnorm))
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite on the search space")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol:
            r = b - A @ x
            rn = np.linalg.norm(r)
            if rn <= tol:
                return x, CGInfo(it, float(rn / bnorm))
            z = dinv * r
            p = z.copy()
            rz = r @ z
            continue
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergence(max_iter, float(np.linalg.norm(b - A @ x) / bnorm))


# ---------------------------------------------------------------------------
# drivers


def _dirichlet_values(mesh: StripMesh, forcing: ForcingModel, t: float) -> np.ndarray:
    pts = mesh.vertices[mesh.dirichlet]
    g = forcing.dirichlet.value(t, pts)
    return np.asarray(g, dtype=float).reshape(len(pts))


def solve_on_mesh(mesh: StripMesh, coeff, forcing, t: float = 0.0, rel_tol: float = 1e-12,
                  max_iter: int | None = None) -> FieldSolution:
    sys_ = assemble_system(mesh, coeff, forcing, t)
    g = _dirichlet_values(mesh, forcing, t)
    Kff, rhs = sys_.reduced(g)
    u = np.zeros(len(mesh.vertices))
    u[sys_.fixed] = g
    if len(sys_.free):
        uf, info = solve_spd(Kff, rhs, rel_tol=rel_tol, max_iter=max_iter)
        u[sys_.free] = uf
        resid = _weak_residual(Kff, uf, rhs)
    else:
        info, resid = CGInfo(0, 0.0), 0.0
    meta = {
        "iterations": [info.iterations],
        "residual": resid,
        "rel_tol": rel_tol,
        "clamped_cells": mesh.clamped,
        "unknowns": int(len(sys_.free)),
    }
    return FieldSolution(mesh, np.array([t]), u[None, :], meta)


def _weak_residual(K, u, rhs) -> float:
    bn = np.linalg.norm(rhs)
    return float(np.linalg.norm(K @ u - rhs) / bn) if bn else float(np.linalg.norm(K @ u))


def solve_elliptic(stack: InterfaceStack, coeff: CoefficientModel, forcing: ForcingModel,
                   mesh_params: MeshParams = MeshParams(), rel_tol: float = 1e-12,
                   max_iter: int | None = None, mesh: StripMesh | None = None) -> FieldSolution:
    mesh = mesh or build_strip_mesh(stack, mesh_params)
    return solve_on_mesh(mesh, coeff, forcing, 0.0, rel_tol, max_iter)


def solve_parabolic(stack: InterfaceStack, coeff: CoefficientModel, forcing: ForcingModel,
                    times: np.ndarray, mesh_params: MeshParams = MeshParams(), rel_tol: float = 1e-12,
                    max_iter: int | None = None, mesh: StripMesh | None = None) -> FieldSolution:
    """Backward Euler with lumped mass on a uniform time grid.

    ``times[0]`` carries the initial datum; every later level is one implicit
    step ``(M/dt + K) u^{n+1} = M u^n / dt + b(t_{n+1})``.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise SolverError("parabolic mode needs at least two time levels")
    steps = np.diff(times)
    dt = steps[0]
    if not dt > 0 or not np.allclose(steps, dt, rtol=1e-10, atol=0):
        raise SolverError("time grid must be uniform and increasing")
    mesh = mesh or build_strip_mesh(stack, mesh_params)
    if forcing.initial is None:
        raise SolverError("parabolic mode needs an initial datum")
    nv = len(mesh.vertices)
    U = np.empty((len(times), nv))
    U[0] = np.asarray(forcing.initial.value(times[0], mesh.vertices), dtype=float).reshape(nv)
    mass = lumped_mass(mesh)
    refresh = coeff.time_dependent or forcing.time_dependent
    sys_ = assemble_system(mesh, coeff, forcing, times[1])
    free, fixed = sys_.free, sys_.fixed
    M = sps.diags(mass / dt).tocsr()
    iters, resid = [], 0.0
    for n in range(1, len(times)):
        t = times[n]
        if refresh and n > 1:
            sys_ = assemble_system(mesh, coeff, forcing, t)
        lhs = (M + sys_.matrix).tocsr()
        rhs_full = mass / dt * U[n - 1] + sys_.rhs
        g = _dirichlet_values(mesh, forcing, t)
        A = lhs[free][:, free].tocsr()
        rhs = rhs_full[free] - lhs[free][:, fixed] @ g
        uf, info = solve_spd(A, rhs, rel_tol=rel_tol, max_iter=max_iter, x0=U[n - 1][free])
        U[n, free] = uf
        U[n, fixed] = g
        iters.append(info.iterations)
        resid = max(resid, _weak_residual(A, uf, rhs))
    meta = {
        "iterations": iters,
        "residual": resid,
        "rel_tol": rel_tol,
        "clamped_cells": mesh.clamped,
        "unknowns": int(len(free)),
        "dt": float(dt),
    }
    return FieldSolution(mesh, times, U, meta)


# ---------------------------------------------------------------------------
# post-processing


@dataclass
class Stencil:
    nodes: np.ndarray
    weights: np.ndarray  # (5, k): rows d/dx, d/dy, d2/dx2, d2/dxdy, d2/dy2
    radius: float


def _region_nodes(mesh: StripMesh, j: int) -> np.ndarray:
    mask = np.zeros(len(mesh.vertices), dtype=bool)
    mask[mesh.triangles[mesh.regions == j].ravel()] = True
    return np.flatnonzero(mask)


class DerivativeRecovery:
    """Moving least-squares quadratic fits over the nodes of one region.

    Only nodes in the closure of region ``j`` enter a fit, so recovered
    derivatives are one-sided at interfaces.  Stencils are linear in the
    nodal values and can be reused across time levels.
    """

    def __init__(self, mesh: StripMesh, j: int, radius: float | None = None):
        self.mesh, self.j = mesh, j
        self.nodes = _region_nodes(mesh, j)
        if not len(self.nodes):
            raise InsufficientStencil(f"region {j} has no nodes")
        self.tree = cKDTree(mesh.vertices[self.nodes])
        self.radius = radius
        if radius is None:
            p = mesh.vertices[mesh.triangles[mesh.regions == j]]
            edge = np.linalg.norm(p - np.roll(p, 1, axis=1), axis=2).max(axis=1)
            self._cent = cKDTree(p.mean(axis=1))
            self._edge = edge

    def _default_radius(self, x) -> float:
        _, i = self._cent.query(x, k=4)
        return 2.5 * float(np.max(self._edge[i]))

    def stencil(self, x) -> Stencil:
        x = np.asarray(x, dtype=float)
        rho = self.radius if self.radius is not None else self._default_radius(x)
        for _ in range(4):
            idx = np.asarray(self.tree.query_ball_point(x, rho), dtype=int)
            if len(idx) >= 6:
                st = self._fit(x, idx, rho)
                if st is not None:
                    return st
            rho *= 2.0
        raise InsufficientStencil(f"fewer than 6 usable region-{self.j} nodes near {x.tolist()}")

    def _fit(self, x, idx, rho):
        pts = self.mesh.vertices[self.nodes[idx]] - x
        r2 = np.sum(pts**2, axis=1) / rho**2
        w = (1.0 - r2) ** 2 + 1e-3
        sx = max(float(np.ptp(pts[:, 0])), 1e-300)
        sy = max(float(np.ptp(pts[:, 1])), 1e-300)
        dx, dy = pts[:, 0] / sx, pts[:, 1] / sy
        B = np.column_stack([np.ones_like(dx), dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy])
        sw = np.sqrt(w)
        Bw = B * sw[:, None]
        u, s, vt = np.linalg.svd(Bw, full_matrices=False)
        if s[-1] < 1e-10 * s[0]:
            return None
        pinv = (vt.T / s) @ u.T * sw[None, :]  # (6, k)
        scale = np.array([1.0 / sx, 1.0 / sy, 1.0 / sx**2, 1.0 / (sx * sy), 1.0 / sy**2])
        return Stencil(self.nodes[idx], pinv[1:] * scale[:, None], rho)

    def stencils(self, points) -> list[Stencil]:
        return [self.stencil(p) for p in np.atleast_2d(points)]


def recover_derivatives(mesh: StripMesh, values: np.ndarray, j: int, points, radius: float | None = None):
    """Recovered gradients ``(N, 2)`` and Hessians ``(N, 2, 2)`` in region ``j``.

    ``values`` is a nodal vector, or a :class:`FieldSolution` (last time slab).
    """
    if isinstance(values, FieldSolution):
        values = values.values[-1]
    rec = DerivativeRecovery(mesh, j, radius)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    grads = np.empty((len(pts), 2))
    hess = np.empty((len(pts), 2, 2))
    for i, st in enumerate(rec.stencils(pts)):
        c = st.weights @ values[st.nodes]
        grads[i] = c[:2]
        hess[i] = [[c[2], c[3]], [c[3], c[4]]]
    return grads, hess


@dataclass
class FluxJump:
    lower: np.ndarray
    upper: np.ndarray
    jump: np.ndarray
    midpoints: np.ndarray
    interface: np.ndarray

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.jump))) if len(self.jump) else 0.0


def interface_flux_jump(mesh: StripMesh, solution: FieldSolution, coeff: CoefficientModel,
                        forcing: ForcingModel, stack: InterfaceStack, step: int = -1) -> FluxJump:
    """Two-sided conormal flux ``n_j . (A grad u_h - f)`` at interface edge midpoints."""
    E = mesh.interface_edges
    if not len(E):
        z = np.zeros(0)
        return FluxJump(z, z, z, np.zeros((0, 2)), np.zeros(0, dtype=int))
    t = float(solution.times[step])
    grads = solution.gradients(step)
    mid = 0.5 * (mesh.vertices[E[:, 0]] + mesh.vertices[E[:, 1]])
    iface = E[:, 2]
    sides = []
    for col in (3, 4):
        elems = E[:, col]
        regs = mesh.regions[elems]
        flux = np.empty(len(E))
        for j in np.unique(regs):
            sel = regs == j
            A = coeff.regions[j - 1].value(t, mid[sel])
            f = forcing.regions[j - 1].value(t, mid[sel])
            for jj in np.unique(iface[sel]):
                s2 = np.flatnonzero(sel)[iface[sel] == jj]
                n = interface_normal(stack, int(jj), mid[s2, 0])
                loc = np.searchsorted(np.flatnonzero(sel), s2)
                vec = np.einsum("nab,nb->na", A[loc], grads[elems[s2]]) - f[loc]
                flux[s2] = np.einsum("na,na->n", n, vec)
        sides.append(flux)
    return FluxJump(sides[0], sides[1], sides[1] - sides[0], mid, iface)
