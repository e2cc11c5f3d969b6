"""Regularity diagnostics for piecewise solutions.

Sampled Hölder seminorms, the Campanato functional of the pair
``(D_l u, U)`` with ``U = n . (A grad u - f)``, decay-exponent fits, time
difference quotients, piecewise-constant projections and gap sweeps over
the parabola-neck family.  Every sampled sup is a lower bound for the true
sup; budgets and seeds are part of each result.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .geometry import (
    DEFAULT_SEED,
    InterfaceStack,
    _nearest_boundary_point,
    anchor_points,
    eval_interface,
    frame_at_anchor,
    frame_field,
    interface_normal_jacobian,
)
from .solver import (
    CoefficientModel,
    DerivativeRecovery,
    FieldSolution,
    ForcingModel,
    InsufficientStencil,
    SolverError,
)

log = logging.getLogger(__name__)


class DiagnosticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# distances and seminorms


@dataclass(frozen=True)
class ParabolicPoint:
    t: float
    x: tuple


def _split(z):
    if isinstance(z, ParabolicPoint):
        return z.t, np.asarray(z.x, dtype=float)
    t, x = z
    return float(t), np.asarray(x, dtype=float)


def parabolic_distance(z1, z2) -> float:
    """``max(|t1 - t2|^(1/2), |x1 - x2|)`` for points ``(t, x)``."""
    t1, x1 = _split(z1)
    t2, x2 = _split(z2)
    return float(max(np.sqrt(abs(t1 - t2)), np.linalg.norm(x1 - x2)))


@dataclass
class SeminormRequest:
    """What to sample for a Hölder seminorm.

    ``sampler(t, x)`` returns values of shape ``(N,)`` or ``(N, k)`` at the
    candidate ``points``; ``times`` (parabolic metric only) gives one time
    per point.  Pairs are all pairs among an evenly strided subset of at most
    ``grid`` points, plus ``budget`` seeded random pairs among all points.
    """

    sampler: Callable
    points: np.ndarray
    gamma: float = 0.5
    metric: str = "spatial"
    times: np.ndarray | None = None
    budget: int = 20000
    grid: int = 400
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise DiagnosticsError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.metric not in ("spatial", "parabolic"):
            raise DiagnosticsError(f"unknown metric {self.metric!r}")
        if self.budget < 2 and self.grid < 2:
            raise DiagnosticsError("sample budget must be at least 2")


def _pairs(n: int, grid: int, budget: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    sub = np.unique(np.linspace(0, n - 1, min(n, grid)).round().astype(int))
    i, j = np.triu_indices(len(sub), k=1)
    a, b = [sub[i]], [sub[j]]
    if budget > 0 and n > 1:
        rng = np.random.default_rng(seed)
        ra = rng.integers(0, n, budget)
        rb = rng.integers(0, n, budget)
        a.append(ra)
        b.append(rb)
    return np.concatenate(a), np.concatenate(b)


def seminorm_from_values(values, points, gamma, metric="spatial", times=None, grid=400,
                         budget=20000, seed=DEFAULT_SEED) -> float:
    vals = np.asarray(values, dtype=float)
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if n < 2:
        raise DiagnosticsError("need at least two sample points")
    a, b = _pairs(n, grid, budget, seed)
    dv = vals[a] - vals[b]
    num = np.abs(dv) if dv.ndim == 1 else np.linalg.norm(dv, axis=1)
    dx = np.linalg.norm(pts[a] - pts[b], axis=1)
    den = dx**gamma
    if metric == "parabolic":
        tt = np.zeros(n) if times is None else np.asarray(times, dtype=float)
        den = den + np.abs(tt[a] - tt[b]) ** (gamma / 2)
    ok = den > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(num[ok] / den[ok]))


def holder_seminorm(req: SeminormRequest) -> float:
    """Sampled ``[u]_gamma`` (spatial) or ``[u]_{gamma/2, gamma}`` (parabolic)."""
    pts = np.asarray(req.points, dtype=float)
    if len(pts) == 0:
        raise DiagnosticsError("empty sample set")
    P = pts if pts.ndim == 2 else pts[:, None]
    t = req.times if req.times is not None else np.zeros(len(P))
    vals = req.sampler(t, P)
    return seminorm_from_values(vals, P, req.gamma, req.metric, req.times, req.grid, req.budget, req.seed)


# ---------------------------------------------------------------------------
# samplers built from a solution


def _time_weights(times: np.ndarray, t: float):
    if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
        raise DiagnosticsError(f"time {t} outside solved range [{times[0]}, {times[-1]}]")
    if len(times) == 1:
        return 0, 0, 1.0
    k = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    w = (t - times[k]) / (times[k + 1] - times[k])
    if abs(w - 1.0) < 1e-9:
        return k + 1, k + 1, 1.0
    if abs(w) < 1e-9:
        return k, k, 1.0
    return k, k + 1, 1.0 - w


class RecoveredGradient:
    """Sampler ``(t, x) -> grad u`` from MLS recovery in one region.

    Stencils depend only on the points, so they are cached and applied to
    every requested time level (linear interpolation between levels).
    """

    def __init__(self, solution: FieldSolution, j: int, radius: float | None = None):
        self.solution = solution
        self.rec = DerivativeRecovery(solution.mesh, j, radius)
        self._cache: dict = {}

    def _stencils(self, pts):
        key = pts.tobytes()
        if key not in self._cache:
            self._cache[key] = self.rec.stencils(pts)
        return self._cache[key]

    def coefficients(self, t: float, pts: np.ndarray) -> np.ndarray:
        """Fitted ``[ux, uy, uxx, uxy, uyy]`` at one time, shape ``(N, 5)``."""
        k0, k1, w = _time_weights(self.solution.times, t)
        u = w * self.solution.values[k0] + (1.0 - w) * self.solution.values[k1]
        return np.array([st.weights @ u[st.nodes] for st in self._stencils(pts)])

    def __call__(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        out = np.empty((len(x), 2))
        for tv in np.unique(t):
            sel = t == tv
            out[sel] = self.coefficients(float(tv), x[sel])[:, :2]
        return out

    def hessian(self, t: float, x) -> np.ndarray:
        c = self.coefficients(t, np.atleast_2d(np.asarray(x, dtype=float)))
        return np.stack([np.stack([c[:, 2], c[:, 3]], -1), np.stack([c[:, 3], c[:, 4]], -1)], -2)


@dataclass
class DirectionalFields:
    """Samplers for ``D_{l^k} u = l^k . grad u_h`` and ``U = n . (A grad u_h - f)``."""

    solution: FieldSolution
    stack: InterfaceStack
    coeff: CoefficientModel | None = None
    forcing: ForcingModel | None = None
    k: int = 1

    def _parts(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = int(np.argmin(np.abs(self.solution.times - t)))
        g, e = self.solution.gradient_at(x, step)
        reg = self.solution.mesh.regions[e]
        ff = frame_field(self.stack, x, strip=None)
        flux = g.copy()
        if self.coeff is not None:
            for j in np.unique(reg):
                sel = reg == j
                A = self.coeff.regions[j - 1].value(t, x[sel])
                flux[sel] = np.einsum("nab,nb->na", A, g[sel])
                if self.forcing is not None:
                    flux[sel] -= self.forcing.regions[j - 1].value(t, x[sel])
        return g, flux, ff

    def tangential(self, t, x) -> np.ndarray:
        g, _, ff = self._parts(t, x)
        return np.einsum("na,na->n", ff.tangents[:, self.k - 1], g)

    def conormal(self, t, x) -> np.ndarray:
        _, flux, ff = self._parts(t, x)
        return np.einsum("na,na->n", ff.normals, flux)

    def pair(self, t, x) -> tuple[np.ndarray, np.ndarray]:
        g, flux, ff = self._parts(t, x)
        return (np.einsum("na,na->n", ff.tangents[:, self.k - 1], g),
                np.einsum("na,na->n", ff.normals, flux))

    def interface_jumps(self, step: int = -1) -> dict:
        """Sup over interface edges of the two-sided jumps of both samplers."""
        mesh, sol = self.solution.mesh, self.solution
        E = mesh.interface_edges
        if not len(E):
            return {"tangential": 0.0, "conormal": 0.0}
        t = float(sol.times[step])
        grads = sol.gradients(step)
        mid = 0.5 * (mesh.vertices[E[:, 0]] + mesh.vertices[E[:, 1]])
        ff = frame_field(self.stack, mid)
        tang, conn = [], []
        for col in (3, 4):
            el = E[:, col]
            g = grads[el]
            flux = g.copy()
            if self.coeff is not None:
                for j in np.unique(mesh.regions[el]):
                    sel = mesh.regions[el] == j
                    flux[sel] = np.einsum("nab,nb->na", self.coeff.regions[j - 1].value(t, mid[sel]), g[sel])
                    if self.forcing is not None:
                        flux[sel] -= self.forcing.regions[j - 1].value(t, mid[sel])
            tang.append(np.einsum("na,na->n", ff.tangents[:, self.k - 1], g))
            conn.append(np.einsum("na,na->n", ff.normals, flux))
        return {
            "tangential": float(np.max(np.abs(tang[1] - tang[0]))),
            "conormal": float(np.max(np.abs(conn[1] - conn[0]))),
        }


def directional_derivative_field(solution, stack, coeff=None, forcing=None, k: int = 1) -> DirectionalFields:
    return DirectionalFields(solution, stack, coeff, forcing, k)


# ---------------------------------------------------------------------------
# corrected flux data


@dataclass
class CorrectedFlux:
    """Samplers for ``f_1``, ``h~_j`` and ``f_3`` anchored at ``z0``."""

    solution: FieldSolution
    stack: InterfaceStack
    coeff: CoefficientModel
    forcing: ForcingModel
    z0: tuple
    k: int = 1

    def __post_init__(self):
        t0, x0 = _split(self.z0)
        self.t0, self.x0 = t0, x0
        self.j0 = int(self.stack.region_index(x0[None, :])[0])
        self.anchors = anchor_points(self.stack, x0, self.j0)
        step = int(np.argmin(np.abs(self.solution.times - t0)))
        self._anchor_grads = []
        for j, p in enumerate(self.anchors, start=1):
            self._anchor_grads.append(self._one_sided_gradient(p, j, step))

    def _one_sided_gradient(self, p, j, step):
        """Element gradient of ``u_h`` at ``p`` taken from an element of region ``j``."""
        mesh = self.solution.mesh
        c = mesh.centroids()
        sel = np.flatnonzero(mesh.regions == j)
        e = sel[np.argmin(np.sum((c[sel] - p) ** 2, axis=1))]
        loc = mesh.locate(p[None, :])[0]
        if loc >= 0 and mesh.regions[loc] == j:
            e = loc
        return self.solution.gradients(step)[e]

    def _local(self, t, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        step = int(np.argmin(np.abs(self.solution.times - t)))
        g, e = self.solution.gradient_at(x, step)
        reg = self.solution.mesh.regions[e]
        return x, g, reg

    def f1(self, t, x) -> np.ndarray:
        x, g, reg = self._local(t, x)
        ff = frame_field(self.stack, x)
        ell = ff.tangents[:, self.k - 1]
        dell = ff.tangent_jac[:, self.k - 1]  # [n, i, b] = d l_i / d x_b
        out = np.empty_like(g)
        for j in np.unique(reg):
            s = reg == j
            A = self.coeff.regions[j - 1].value(t, x[s])
            dA = self.coeff.regions[j - 1].grad(t, x[s])  # (n, a, b, c)
            df = self.forcing.regions[j - 1].grad(t, x[s])  # (n, a, c)
            Dl_f = np.einsum("nac,nc->na", df, ell[s])
            term = np.einsum("nab,nib,ni->na", A, dell[s], g[s])
            Dl_A = np.einsum("nabc,nc->nab", dA, ell[s])
            out[s] = Dl_f + term - np.einsum("nab,nb->na", Dl_A, g[s])
        return out

    def h_tilde(self, j: int, xp, step: int = -1) -> np.ndarray:
        """``[D_l n_j . (-A grad u + f)]`` on ``Gamma_j`` from two-sided element traces."""
        xp = np.atleast_1d(np.asarray(xp, dtype=float))
        t = float(self.solution.times[step])
        H = eval_interface(self.stack, j, xp, 0)[0]
        pts = np.column_stack([xp, H])
        ff = frame_field(self.stack, pts)
        ell = ff.tangents[:, self.k - 1]
        _, Jn = interface_normal_jacobian(self.stack, j, xp)
        Dl_n = Jn[:, :, 0] * ell[:, :1]  # n_j depends on x' only
        mesh = self.solution.mesh
        grads = self.solution.gradients(step)
        E = mesh.interface_edges[mesh.interface_edges[:, 2] == j]
        xe0, xe1 = mesh.vertices[E[:, 0], 0], mesh.vertices[E[:, 1], 0]
        lo_x, hi_x = np.minimum(xe0, xe1), np.maximum(xe0, xe1)
        idx = np.clip(np.searchsorted(hi_x, xp), 0, len(E) - 1)
        if np.any((xp < lo_x[idx] - 1e-12) | (xp > hi_x[idx] + 1e-12)):
            order = np.argsort(lo_x)
            lo_x, hi_x, E = lo_x[order], hi_x[order], E[order]
            idx = np.clip(np.searchsorted(hi_x, xp), 0, len(E) - 1)
        sides = []
        for col, reg in ((3, j), (4, j + 1)):
            g = grads[E[idx, col]]
            A = self.coeff.regions[reg - 1].value(t, pts)
            f = self.forcing.regions[reg - 1].value(t, pts)
            vec = -np.einsum("nab,nb->na", A, g) + f
            sides.append(np.einsum("na,na->n", Dl_n, vec))
        return sides[1] - sides[0]

    def f3(self, t, x) -> np.ndarray:
        x, g, reg = self._local(t, x)
        out = self.f1(t, x)
        m = self.stack.m
        for j, (p, gp) in enumerate(zip(self.anchors, self._anchor_grads), start=1):
            ext = frame_field(self.stack, x, strip=j)
            dl = ext.tangent_jac[:, self.k - 1]  # (n, i, b)
            corr = np.einsum("nib,i->nb", dl, gp)
            for r in np.unique(reg):
                s = reg == r
                A = self.coeff.regions[r - 1].value(t, x[s])
                out[s] -= np.einsum("nab,nb->na", A, corr[s])
        if m:
            H = self.stack.heights(x[:, :1])
            step = int(np.argmin(np.abs(self.solution.times - t)))
            for j in range(1, m + 1):
                above = x[:, 1] > H[j - 1]
                if not np.any(above):
                    continue
                n_j, _ = interface_normal_jacobian(self.stack, j, x[above, 0])
                ht = self.h_tilde(j, x[above, 0], step)
                out[above, 1] += ht / n_j[:, 1]
        return out


def corrected_flux_data(solution, stack, coeff, forcing, z0, k: int = 1) -> CorrectedFlux:
    return CorrectedFlux(solution, stack, coeff, forcing, z0, k)


# ---------------------------------------------------------------------------
# Campanato functional


def _min_half_power_mean(g: np.ndarray) -> float:
    """``min_q mean |g - q|^(1/2)``.

    The objective is concave between consecutive sample values, so its
    minimum is attained at one of them; evaluate them all.
    """
    g = np.sort(np.asarray(g, dtype=float).ravel())
    if len(g) == 0:
        raise DiagnosticsError("empty sample set")
    cand = np.unique(g)
    best = np.inf
    for chunk in np.array_split(cand, max(1, len(cand) // 512)):
        vals = np.mean(np.sqrt(np.abs(g[None, :] - chunk[:, None])), axis=1)
        best = min(best, float(vals.min()))
    return best


def campanato_phi_values(g1: np.ndarray, g2: np.ndarray) -> float:
    """``Phi = (min_q mean|g1 - q|^(1/2) + min_Q mean|g2 - Q|^(1/2))^2``."""
    return (_min_half_power_mean(g1) + _min_half_power_mean(g2)) ** 2


def disk_samples(center, r: float, budget: int = 1500, box=(-1.0, 1.0)) -> np.ndarray:
    """Deterministic uniform grid points inside ``B_r(center)`` and the domain."""
    c = np.asarray(center, dtype=float)
    n = max(3, int(np.ceil(np.sqrt(budget * 4.0 / np.pi))))
    s = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    X, Y = np.meshgrid(s, s, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts = pts[np.sum(pts**2, axis=1) < 1.0] * r + c
    inside = np.all((pts > box[0]) & (pts < box[1]), axis=1)
    return pts[inside]


def campanato_phi(sampler: Callable, z0, r: float, budget: int = 1500,
                  times: np.ndarray | None = None) -> float:
    """Sampled Campanato functional over ``Q_r^-(z0)``.

    ``sampler(t, x)`` returns the pair ``(g1, g2)``.  With ``times`` (the
    solved time levels) the cylinder ``(t0 - r^2, t0] x B_r(x0)`` uses every
    level in range; otherwise only ``t0`` is sampled.
    """
    t0, x0 = _split(z0)
    pts = disk_samples(x0, r, budget)
    if len(pts) == 0:
        raise DiagnosticsError("empty sample set")
    levels = [t0]
    if times is not None:
        times = np.asarray(times)
        levels = [float(t) for t in times if t0 - r * r < t <= t0 + 1e-12] or [t0]
    g1, g2 = [], []
    for t in levels:
        a, b = sampler(t, pts)
        g1.append(a)
        g2.append(b)
    return campanato_phi_values(np.concatenate(g1), np.concatenate(g2))


@dataclass
class DecayFit:
    exponent: float
    intercept: float
    used: int
    dropped: int


def decay_fit(records: Sequence[tuple[float, float]]) -> DecayFit:
    """Least-squares slope of ``log Phi`` against ``log r``."""
    rec = np.asarray(records, dtype=float).reshape(-1, 2)
    keep = (rec[:, 1] > 0) & np.isfinite(rec[:, 1])
    if np.sum(keep) < 3:
        raise DiagnosticsError(f"decay fit needs 3 positive records, got {int(np.sum(keep))}")
    slope, icpt = np.polyfit(np.log(rec[keep, 0]), np.log(rec[keep, 1]), 1)
    return DecayFit(float(slope), float(icpt), int(np.sum(keep)), int(np.sum(~keep)))


def campanato_decay(fields: DirectionalFields, z0, radii: Sequence[float], budget: int = 1500):
    """``(records, DecayFit)`` for ``Phi(z0, r)`` over ``radii``."""
    times = fields.solution.times if fields.solution.parabolic else None
    rec = [(float(r), campanato_phi(fields.pair, z0, r, budget, times)) for r in radii]
    return rec, decay_fit(rec)


# ---------------------------------------------------------------------------
# time quotients


@dataclass
class TimeQuotient:
    gamma: float
    h: float
    values: np.ndarray
    times: np.ndarray

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


def time_quotient(field: Callable, gamma: float, h: float, times: Sequence[float], points,
                  t_range: tuple[float, float] | None = None) -> TimeQuotient:
    """``(f(t, x) - f(t - h, x)) / h^gamma`` on a grid of times and points.

    ``field(t, x)`` returns values at points ``x`` for one time.
    """
    if not h > 0:
        raise DiagnosticsError("time step h must be positive")
    times = np.asarray(times, dtype=float)
    if t_range is not None and np.any(times - h < t_range[0] - 1e-12):
        raise DiagnosticsError("t - h lies below the solved range")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = []
    for t in times:
        a = np.asarray(field(float(t), pts), dtype=float)
        b = np.asarray(field(float(t - h), pts), dtype=float)
        d = a - b
        if d.ndim > 1:
            d = np.linalg.norm(d, axis=-1)
        vals.append(d / h**gamma)
    return TimeQuotient(gamma, h, np.array(vals), times)


# ---------------------------------------------------------------------------
# piecewise-constant projection


def _strip_levels(stack: InterfaceStack, frame, y0) -> np.ndarray:
    """``y^d`` coordinates where the normal line through ``y0`` meets each interface."""
    n = frame.normal
    levels = []
    for j in range(1, stack.m + 1):
        def gfun(s, j=j):
            p = y0 + s * n
            return p[1] - eval_interface(stack, j, float(np.clip(p[0], -0.999999, 0.999999)), 0)[0]

        ss = np.linspace(-2.0, 2.0, 401)
        vals = np.array([gfun(s) for s in ss])
        sign = np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0)
        if len(sign):
            k = sign[np.argmin(np.abs(ss[sign]))]
            s = brentq(gfun, ss[k], ss[k + 1], xtol=1e-14) if vals[k] != 0 else ss[k]
            levels.append(float(frame.matrix[-1] @ (y0 + s * n)))
        else:
            levels.append(np.inf if np.all(vals > 0) else -np.inf)
    return np.array(levels)


@dataclass
class Projection:
    r: float
    strip_means: list
    deviation: float
    skipped: list


def piecewise_const_project(sampler: Callable, stack: InterfaceStack, x0, r: float,
                            budget: int = 4000) -> Projection:
    """Per-strip means of ``sampler`` over ``B_r`` and the normalized L1 deviation.

    Strips come from the anchored frame at ``x0``: in the rotated
    coordinates ``y = Lambda x`` they are bands between the ``y^d`` levels
    where the normal line through the anchor meets each interface.  Each
    strip constant is the mean of the field over the true region in the ball.
    """
    x0 = np.asarray(x0, dtype=float)
    frame = frame_at_anchor(stack, x0)
    _, best = _nearest_boundary_point(stack, x0)
    y0 = best[1] if best is not None else x0
    levels = np.concatenate([[-np.inf], np.sort(_strip_levels(stack, frame, y0)), [np.inf]])
    pts = disk_samples(x0, r, budget)
    vals = np.asarray(sampler(pts), dtype=float)
    reg = stack.region_index(pts)
    yd = pts @ frame.matrix[-1]
    strip = np.searchsorted(levels, yd, side="right")
    means, skipped = [], []
    fbar = np.zeros(len(pts))
    for j in range(1, stack.m + 2):
        in_reg = reg == j
        in_strip = strip == j
        if not np.any(in_reg):
            means.append(None)
            if np.any(in_strip):
                skipped.append(j)
            continue
        mu = float(np.mean(vals[in_reg]))
        means.append(mu)
        fbar[in_strip] = mu
    for j in skipped:
        log.info("strip %d meets the ball but region %d does not; skipped", j, j)
    ok = np.ones(len(pts), dtype=bool)
    for j in skipped:
        ok &= strip != j
    dev = float(np.sum(np.abs(vals - fbar)[ok]) / len(pts))
    return Projection(r, means, dev, skipped)


# ---------------------------------------------------------------------------
# per-region norm tables


def _window_points(mesh, j: int, window=None, budget: int = 300) -> np.ndarray:
    c = mesh.centroids()
    sel = mesh.regions == j
    if window is not None:
        sel &= window(c)
    pts = c[sel]
    if len(pts) > budget:
        pts = pts[np.unique(np.linspace(0, len(pts) - 1, budget).round().astype(int))]
    return pts


@dataclass
class RegionNorms:
    region: int
    samples: int
    sup_u: float
    seminorm_Du: float
    sup_D2u: float
    time_seminorm_Du: float | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def piecewise_norm_table(solution: FieldSolution, stack: InterfaceStack, s_level: int = 1,
                         mu_prime: float = 0.5, delta: float = 0.75, window=None, budget: int = 300,
                         seed: int = DEFAULT_SEED, time_steps: Sequence[int] | None = None) -> dict:
    """Per-region ``|u|_0``, ``[Du]_{mu'}``, ``|D^2 u|_inf`` (and the time quotient).

    ``window`` is an optional predicate on points restricting the sample
    set.  The ``gradient_jump`` entry reports the sup over interface edges
    of the jump in element gradients.
    """
    mesh = solution.mesh
    t = float(solution.times[-1])
    rows = []
    for j in range(1, mesh.n_regions + 1):
        pts = _window_points(mesh, j, window, budget)
        if len(pts) < 2:
            continue
        rg = RecoveredGradient(solution, j)
        coef = rg.coefficients(t, pts)
        G = coef[:, :2]
        sup_u = float(np.max(np.abs(mesh.interpolate(solution.values[-1], pts))))
        semi = seminorm_from_values(G, pts, mu_prime, seed=seed) if s_level >= 1 else 0.0
        hess = np.sqrt(coef[:, 2] ** 2 + 2 * coef[:, 3] ** 2 + coef[:, 4] ** 2)
        row = RegionNorms(j, len(pts), sup_u, semi, float(np.max(hess)))
        if solution.parabolic:
            row.time_seminorm_Du = time_seminorm(solution, j, pts, delta, time_steps)
        rows.append(row)
    E = mesh.interface_edges
    jump = 0.0
    if len(E):
        g = solution.gradients()
        jump = float(np.max(np.linalg.norm(g[E[:, 4]] - g[E[:, 3]], axis=1)))
    return {"regions": [r.as_dict() for r in rows], "gradient_jump": jump}


def time_seminorm(solution: FieldSolution, j: int, pts, delta: float = 0.75,
                  steps: Sequence[int] | None = None, t_from: float | None = None) -> float:
    """``max_h sup |Du(t) - Du(t-h)| / h^((1+delta)/2)`` over ``h = k dt``."""
    times = solution.times
    dt = times[1] - times[0]
    steps = steps or [2**i for i in range(int(np.log2(max(1, len(times) - 1))))] or [1]
    rg = RecoveredGradient(solution, j)
    gamma = (1.0 + delta) / 2.0
    best = 0.0
    for k in steps:
        h = k * dt
        lo = times[0] + h if t_from is None else max(t_from, times[0] + h)
        tt = times[times >= lo - 1e-12]
        if not len(tt):
            continue
        tq = time_quotient(lambda t, x: rg(t, x), gamma, h, tt, pts, (times[0], times[-1]))
        best = max(best, tq.sup)
    return best


# ---------------------------------------------------------------------------
# gap sweep


@dataclass
class NeckProblem:
    """One instance of the neck template: stack, data and solved field."""

    eps: float
    stack: InterfaceStack
    coeff: CoefficientModel
    forcing: ForcingModel
    solution: FieldSolution


@dataclass
class SweepRow:
    eps: float
    a0: float
    sup_Du: float
    sup_D2u: list
    seminorm_Du: float
    phi_exponent: float
    iterations: int = 0
    error: str | None = None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SweepTable:
    rows: list
    p1: float | None
    p2: float | None
    window: str

    def as_dict(self) -> dict:
        return {"rows": [r.as_dict() for r in self.rows], "p1": self.p1, "p2": self.p2, "window": self.window}


def neck_window(eps: float, half_width: float | None = None):
    """Box ``|x'| <= w``, ``|y| <= eps/2 + w^2/2 + w`` with ``w = 2 sqrt(eps)`` by default."""
    w = 2.0 * np.sqrt(eps) if half_width is None else float(half_width)
    hy = eps / 2.0 + w * w / 2.0 + w

    def inside(p):
        p = np.atleast_2d(p)
        return (np.abs(p[:, 0]) <= w) & (np.abs(p[:, 1]) <= hy)

    return inside


def sweep_row(problem: NeckProblem, a0: float, window, budget: int = 300,
              radii=(0.2, 0.1, 0.05, 0.02), seed: int = DEFAULT_SEED) -> SweepRow:
    sol = problem.solution
    mesh = sol.mesh
    c = mesh.centroids()
    inw = window(c)
    G = sol.gradients()
    sup_Du = float(np.max(np.linalg.norm(G[inw], axis=1)))
    d2, semi = [], 0.0
    for j in range(1, mesh.n_regions + 1):
        pts = _window_points(mesh, j, window, budget)
        if len(pts) < 2:
            d2.append(0.0)
            continue
        coef = RecoveredGradient(sol, j).coefficients(0.0, pts)
        d2.append(float(np.max(np.sqrt(coef[:, 2] ** 2 + 2 * coef[:, 3] ** 2 + coef[:, 4] ** 2))))
        semi = max(semi, seminorm_from_values(coef[:, :2], pts, 1.0, seed=seed))
    fields = directional_derivative_field(sol, problem.stack, problem.coeff, problem.forcing)
    z0 = (0.0, np.array([0.0, float(problem.stack.heights(np.zeros((1, 1)))[-1, 0])]))
    _, fit = campanato_decay(fields, z0, radii)
    return SweepRow(problem.eps, a0, sup_Du, d2, semi, fit.exponent, int(sum(sol.meta["iterations"])))


def gap_sweep(template: Callable[[float], NeckProblem], eps_list: Sequence[float], a0: float,
              window: float | str = "neck", budget: int = 300, radii=(0.2, 0.1, 0.05, 0.02),
              seed: int = DEFAULT_SEED) -> SweepTable:
    """Run ``template(eps)`` for each gap and tabulate neck-window quantities.

    ``window="neck"`` uses ``|x'| <= 2 sqrt(eps)`` per row; a number fixes
    the half-width for every row so that rows are compared on one set.
    Solver failures are recorded in the row and the sweep continues.
    """
    rows = []
    for eps in eps_list:
        win = neck_window(eps, None if window == "neck" else float(window))
        try:
            rows.append(sweep_row(template(eps), a0, win, budget, radii, seed))
        except (SolverError, InsufficientStencil, DiagnosticsError) as exc:
            log.warning("sweep row eps=%g failed: %s", eps, exc)
            rows.append(SweepRow(eps, a0, np.nan, [], np.nan, np.nan, 0, str(exc)))
    good = [r for r in rows if r.error is None]
    p1 = p2 = None
    if len(good) >= 2:
        e = np.log([r.eps for r in good])
        p1 = float(np.polyfit(e, np.log([r.sup_Du for r in good]), 1)[0])
        d2 = [max(r.sup_D2u) for r in good]
        if min(d2) > 0:
            p2 = float(np.polyfit(e, np.log(d2), 1)[0])
    label = "neck" if window == "neck" else f"fixed:{float(window):g}"
    return SweepTable(rows, p1, p2, label)


# ---------------------------------------------------------------------------
# report


@dataclass
class RegularityReport:
    regions: list = field(default_factory=list)
    decay: list = field(default_factory=list)
    flux_jump_sup: float | None = None
    sweep: dict | None = None
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        out = {
            "regions": self.regions,
            "decay": self.decay,
            "flux_jump_sup": self.flux_jump_sup,
            "sweep": self.sweep,
            "provenance": self.provenance,
        }
        out.update(self.extra)
        return out
