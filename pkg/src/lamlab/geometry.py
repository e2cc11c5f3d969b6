"""Layered interface geometry and interface-adapted frame fields.

The domain is the cube ``(-1, 1)^d`` (``d`` in {2, 3}) cut by graph
interfaces ``x^d = h_j(x')``, ``j = 1..m``, ordered bottom to top.  The
implicit sentinels ``h_0 = -1`` and ``h_{m+1} = 1`` close the stack, so
region ``D_j`` is the strip ``h_{j-1}(x') < x^d < h_j(x')``.

Interfaces carry exact derivatives up to order three.  From their slopes we
build raw tangent fields by interpolating between neighbouring interfaces,
orthonormalise them with Gram-Schmidt and attach the matching normal.  All
point evaluations are vectorised over arrays of shape ``(N, d)``.

Indices ``j`` (interfaces, regions) and ``k`` (tangent number) are 1-based in
the public API, as in the usual notation for layered media.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

TOL_IFACE = 1e-13
DEFAULT_SEED = 0xC0FFEE


class GeometryError(ValueError):
    pass


class OrderingViolation(GeometryError):
    pass


class BracketError(GeometryError):
    pass


class DegenerateFrame(GeometryError):
    pass


# ---------------------------------------------------------------------------
# interface functions


def _falling(e: np.ndarray, k: int) -> np.ndarray:
    out = np.ones_like(e, dtype=float)
    for i in range(k):
        out = out * (e - i)
    return out


class Polynomial:
    """Polynomial ``h(x')`` in ``d - 1`` variables.

    ``coeffs`` is either a sequence ``[c0, c1, c2, ...]`` (one variable) or a
    mapping from exponent tuples to coefficients.
    """

    def __init__(self, coeffs, nvars: int = 1, label: str | None = None):
        if isinstance(coeffs, dict):
            items = [(tuple(int(e) for e in k), float(v)) for k, v in coeffs.items()]
            nvars = len(items[0][0]) if items else nvars
        else:
            items = [((i,) + (0,) * (nvars - 1), float(c)) for i, c in enumerate(coeffs)]
        items = [it for it in items if it[1] != 0.0] or [((0,) * nvars, 0.0)]
        self.nvars = nvars
        self.exponents = np.array([e for e, _ in items], dtype=float)
        self.coeffs = np.array([c for _, c in items], dtype=float)
        self.label = label or "polynomial"

    def _partial(self, xp: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
        # d^alpha of sum_c c * prod x_i^e_i
        fac = self.coeffs.copy()
        terms = np.ones((xp.shape[0], len(self.coeffs)))
        for i in range(self.nvars):
            e = self.exponents[:, i]
            fac = fac * _falling(e, alpha[i])
            p = np.maximum(e - alpha[i], 0.0)
            terms = terms * np.power(xp[:, i : i + 1], p)
        return terms @ fac

    def derivs(self, xp: np.ndarray, order: int = 2) -> list[np.ndarray]:
        n, q = xp.shape
        out = [self._partial(xp, (0,) * q)]
        if order >= 1:
            g = np.empty((n, q))
            for a in range(q):
                g[:, a] = self._partial(xp, _unit(q, a))
            out.append(g)
        if order >= 2:
            h = np.empty((n, q, q))
            for a in range(q):
                for b in range(q):
                    h[:, a, b] = self._partial(xp, _unit(q, a, b))
            out.append(h)
        if order >= 3:
            t = np.empty((n, q, q, q))
            for a in range(q):
                for b in range(q):
                    for c in range(q):
                        t[:, a, b, c] = self._partial(xp, _unit(q, a, b, c))
            out.append(t)
        return out

    def to_spec(self) -> dict:
        return {
            "kind": "polynomial",
            "terms": [[list(map(int, e)), float(c)] for e, c in zip(self.exponents, self.coeffs)],
        }


def _unit(q: int, *axes: int) -> tuple[int, ...]:
    alpha = [0] * q
    for a in axes:
        alpha[a] += 1
    return tuple(alpha)


class Cosine:
    """``h(x') = amplitude * cos(omega . x' + phase) + offset``."""

    def __init__(self, amplitude: float, omega, phase: float = 0.0, offset: float = 0.0, nvars: int = 1):
        self.amplitude = float(amplitude)
        self.omega = np.broadcast_to(np.asarray(omega, dtype=float), (nvars,)).copy()
        self.phase = float(phase)
        self.offset = float(offset)
        self.nvars = nvars
        self.label = "cosine"

    def derivs(self, xp: np.ndarray, order: int = 2) -> list[np.ndarray]:
        w = self.omega
        theta = xp @ w + self.phase
        c, s = np.cos(theta), np.sin(theta)
        amp = self.amplitude
        out = [amp * c + self.offset]
        if order >= 1:
            out.append(-amp * s[:, None] * w)
        if order >= 2:
            out.append(-amp * c[:, None, None] * np.einsum("a,b->ab", w, w))
        if order >= 3:
            out.append(amp * s[:, None, None, None] * np.einsum("a,b,c->abc", w, w, w))
        return out

    def to_spec(self) -> dict:
        return {
            "kind": "cosine",
            "A": self.amplitude,
            "omega": self.omega.tolist(),
            "phi": self.phase,
            "offset": self.offset,
        }


def flat(c: float, dim: int = 2) -> Polynomial:
    return Polynomial({(0,) * (dim - 1): c}, nvars=dim - 1, label="flat")


def parabola(a: float, b: float = 0.0, c: float = 0.0, dim: int = 2) -> Polynomial:
    """``a|x'|^2 + b x'_1 + c``."""
    q = dim - 1
    terms = {(0,) * q: c, _unit(q, 0): b}
    for i in range(q):
        terms[_unit(q, i, i)] = terms.get(_unit(q, i, i), 0.0) + a
    return Polynomial(terms, nvars=q, label="parabola")


def cosine(amplitude: float, omega: float, phase: float = 0.0, offset: float = 0.0, dim: int = 2) -> Cosine:
    return Cosine(amplitude, omega, phase, offset, nvars=dim - 1)


# ---------------------------------------------------------------------------
# the stack


class InterfaceStack:
    """Ordered graph interfaces ``-1 < h_1 <= ... <= h_m < 1``."""

    def __init__(self, interfaces: Sequence, dim: int = 2, check: bool = True):
        if dim not in (2, 3):
            raise GeometryError(f"dimension must be 2 or 3, got {dim}")
        self.dim = dim
        self.interfaces = list(interfaces)
        for h in self.interfaces:
            if h.nvars != dim - 1:
                raise GeometryError("interface variable count does not match dimension")
        if check:
            self._check_ordering()

    @property
    def m(self) -> int:
        return len(self.interfaces)

    def _check_grid(self) -> np.ndarray:
        if self.dim == 2:
            return np.linspace(-0.999, 0.999, 401)[:, None]
        g = np.linspace(-0.999, 0.999, 61)
        X, Y = np.meshgrid(g, g, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def _check_ordering(self) -> None:
        if self.m == 0:
            return
        xp = self._check_grid()
        H = self.heights(xp)
        if np.any(H <= -1.0) or np.any(H >= 1.0):
            j = int(np.argwhere((H <= -1.0) | (H >= 1.0))[0, 0]) + 1
            raise OrderingViolation(f"interface {j} leaves (-1, 1)")
        for j in range(1, self.m):
            diff = H[j] - H[j - 1]
            if np.any(diff < 0.0):
                i = int(np.argmin(diff))
                raise OrderingViolation(
                    f"interface {j + 1} lies below interface {j} at x'={xp[i].tolist()}"
                )
            if self.dim == 2:
                touch = diff == 0.0
                if np.any(touch[1:] & touch[:-1]):
                    raise OrderingViolation(
                        f"interfaces {j} and {j + 1} coincide on an interval"
                    )

    # vectorised evaluation --------------------------------------------------

    def _xp(self, xp) -> np.ndarray:
        xp = np.asarray(xp, dtype=float)
        if xp.ndim == 0:
            xp = xp.reshape(1, 1)
        elif xp.ndim == 1:
            xp = xp.reshape(-1, 1) if self.dim == 2 else xp.reshape(1, -1)
        return xp

    def levels(self, xp, order: int = 2) -> list[np.ndarray]:
        """Stacked derivatives of all interior interfaces.

        Returns ``[H (m, N), G (m, N, q), S (m, N, q, q), ...]`` up to ``order``.
        """
        xp = self._xp(xp)
        n, q = xp.shape
        if self.m == 0:
            shapes = [(0, n), (0, n, q), (0, n, q, q), (0, n, q, q, q)]
            return [np.zeros(s) for s in shapes[: order + 1]]
        per = [h.derivs(xp, order) for h in self.interfaces]
        return [np.stack([p[o] for p in per]) for o in range(order + 1)]

    def heights(self, xp) -> np.ndarray:
        return self.levels(xp, 0)[0]

    def bounds(self, xp) -> np.ndarray:
        """Heights including sentinels, shape ``(m + 2, N)``."""
        H = self.heights(xp)
        n = H.shape[1]
        return np.vstack([-np.ones((1, n)), H, np.ones((1, n))])

    def region_index(self, x) -> np.ndarray:
        """Strip index ``1 + #{j : h_j(x') <= x^d}`` for each point."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        H = self.heights(x[:, :-1])
        return 1 + np.sum(H <= x[:, -1], axis=0)

    def local_gap(self, x) -> np.ndarray:
        """Height of the strip containing each point (sentinels included)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        B = self.bounds(x[:, :-1])
        r = self.region_index(x)
        idx = np.arange(x.shape[0])
        return B[r, idx] - B[r - 1, idx]

    def to_spec(self) -> dict:
        return {"dimension": self.dim, "interfaces": [h.to_spec() for h in self.interfaces]}


def neck_stack(eps: float, dim: int = 2) -> InterfaceStack:
    """Two parabolic interfaces ``-/+ (eps/2 + |x'|^2/2)`` nearly touching at 0."""
    return InterfaceStack(
        [parabola(-0.5, 0.0, -eps / 2, dim), parabola(0.5, 0.0, eps / 2, dim)], dim=dim
    )


# ---------------------------------------------------------------------------
# elementary operations


def eval_interface(stack: InterfaceStack, j: int, xp, order: int = 3):
    """Value and derivatives of ``h_j`` at ``x'`` up to ``order`` (<= 3)."""
    if not 1 <= j <= stack.m:
        raise GeometryError(f"interface index {j} outside 1..{stack.m}")
    if not 0 <= order <= 3:
        raise GeometryError("order must be in 0..3")
    arr = stack._xp(xp)
    if np.any(np.linalg.norm(arr, axis=1) >= 1.0):
        raise GeometryError("|x'| must be < 1")
    out = stack.interfaces[j - 1].derivs(arr, order)
    single = np.ndim(xp) == 0 or (np.ndim(xp) == 1 and stack.dim == 3)
    if not single:
        return tuple(out)
    out = [o[0] for o in out]
    if stack.dim == 2:
        out = [float(np.ravel(o)[0]) for o in out]
    return tuple(out)


@dataclass(frozen=True)
class RegionIncidence:
    kind: str  # "interior" | "interface" | "outer_boundary"
    j: int
    proximity: float


def classify_point(stack: InterfaceStack, x, tol: float = TOL_IFACE) -> RegionIncidence:
    x = np.asarray(x, dtype=float)
    xp, xd = x[:-1], x[-1]
    if np.linalg.norm(xp) >= 1.0 or abs(xd) > 1.0:
        raise GeometryError(f"point {x.tolist()} outside the domain")
    H = stack.heights(xp[None, :])[:, 0]
    prox = np.inf
    if stack.m:
        prox = min(
            nearest_projection(stack, j, x, half_width=max(abs(xd - H[j - 1]) * 1.01, 1e-6))[1]
            for j in range(1, stack.m + 1)
        )
    if stack.m:
        near = np.abs(xd - H) <= tol
        if np.any(near):
            return RegionIncidence("interface", int(np.argmax(near)) + 1, float(prox))
    if abs(xd) >= 1.0:
        return RegionIncidence("outer_boundary", 1 if xd < 0 else stack.m + 1, float(prox))
    j = 1 + int(np.sum(H <= xd))
    return RegionIncidence("interior", j, float(prox))


def interface_normal(stack: InterfaceStack, j: int, xp) -> np.ndarray:
    """Unit upward normal of ``Gamma_j`` at ``x'``."""
    if not 1 <= j <= stack.m:
        raise GeometryError(f"interface index {j} outside 1..{stack.m}")
    single = np.ndim(xp) == 0 or (np.ndim(xp) == 1 and stack.dim == 3)
    arr = stack._xp(xp)
    _, g = stack.interfaces[j - 1].derivs(arr, 1)
    nrm = np.column_stack([-g, np.ones(len(arr))])
    nrm /= np.sqrt(1.0 + np.sum(g * g, axis=1))[:, None]
    return nrm[0] if single else nrm


def interface_normal_jacobian(stack: InterfaceStack, j: int, xp) -> tuple[np.ndarray, np.ndarray]:
    """``n_j`` and ``d n_j / d x'`` with shapes ``(N, d)`` and ``(N, d, d-1)``."""
    arr = stack._xp(xp)
    _, g, S = stack.interfaces[j - 1].derivs(arr, 2)
    s = np.sqrt(1.0 + np.sum(g * g, axis=1))
    v = np.column_stack([-g, np.ones(len(arr))])
    dv = np.zeros((len(arr), stack.dim, stack.dim - 1))
    dv[:, :-1, :] = -S
    ds = np.einsum("na,nab->nb", g, S) / s[:, None]
    jac = dv / s[:, None, None] - v[:, :, None] * ds[:, None, :] / (s * s)[:, None, None]
    return v / s[:, None], jac


# ---------------------------------------------------------------------------
# frame fields


def _raw_fields(stack: InterfaceStack, x: np.ndarray, strip=None):
    """Raw tangents ``l^{k,0}`` and their Jacobians.

    Returns ``V (N, d-1, d)``, ``J (N, d-1, d, d)`` with ``J[n, k, i, b] =
    d l^{k,0}_i / d x_b``, and the strip index used per point.  With
    ``strip`` given, the strip formula is evaluated without the case
    restriction (smooth extension of that strip's field).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    q = d - 1
    xp, xd = x[:, :q], x[:, q]
    H, G, S = stack.levels(xp, 2)
    m = stack.m
    if strip is None:
        r = 1 + np.sum(H <= xd, axis=0) if m else np.ones(n, dtype=int)
    else:
        r = np.full(n, int(strip))
    V = np.zeros((n, q, d))
    J = np.zeros((n, q, d, d))
    for k in range(q):
        V[:, k, k] = 1.0
    if m == 0:
        return V, J, r
    idx = np.arange(n)
    lo = np.clip(r - 2, 0, m - 1)
    hi = np.clip(r - 1, 0, m - 1)
    bottom = r <= 1
    top = r >= m + 1
    mid = ~(bottom | top)
    # outer strips copy the nearest interface slope, constant in x^d
    src = np.where(bottom, 0, m - 1)
    Hlo, Hhi = H[lo, idx], H[hi, idx]
    Glo, Ghi = G[lo, idx], G[hi, idx]
    Slo, Shi = S[lo, idx], S[hi, idx]
    gap = Hhi - Hlo
    if strip is not None and np.any(mid & (gap <= 0.0)):
        raise GeometryError(f"donor strip {strip} has zero gap at a query column")
    touch = mid & (gap <= 0.0)
    safe = np.where(touch | ~mid, 1.0, gap)
    s = np.where(mid, (xd - Hlo) / safe, 0.0)
    s = np.where(touch, 0.5, s)
    dG = Ghi - Glo  # (N, q)
    # ds/dx' and ds/dx^d inside a strip
    ds_dxp = np.where(mid[:, None], (-Glo - s[:, None] * dG) / safe[:, None], 0.0)
    ds_dxd = np.where(mid & ~touch, 1.0 / safe, 0.0)
    for k in range(q):
        val_mid = s * Ghi[:, k] + (1.0 - s) * Glo[:, k]
        val_out = G[src, idx, k]
        V[:, k, q] = np.where(mid, val_mid, val_out)
        grad_mid = ds_dxp * dG[:, k : k + 1] + s[:, None] * Shi[:, k, :] + (1.0 - s)[:, None] * Slo[:, k, :]
        grad_out = S[src, idx, k, :]
        J[:, k, q, :q] = np.where(mid[:, None], grad_mid, grad_out)
        J[:, k, q, q] = np.where(mid, ds_dxd * dG[:, k], 0.0)
    return V, J, r


def _gram_schmidt(V: np.ndarray, J: np.ndarray):
    """Classical Gram-Schmidt on ``V[:, k]`` with Jacobian propagation."""
    n, q, d = V.shape
    eye = np.eye(d)
    L = np.empty_like(V)
    JL = np.empty_like(J)
    for k in range(q):
        w = V[:, k].copy()
        Jw = J[:, k].copy()
        for i in range(k):
            li, Jli = L[:, i], JL[:, i]
            c = np.einsum("ni,ni->n", li, V[:, k])
            dc = np.einsum("ni,nib->nb", li, J[:, k]) + np.einsum("ni,nib->nb", V[:, k], Jli)
            w -= c[:, None] * li
            Jw -= c[:, None, None] * Jli + li[:, :, None] * dc[:, None, :]
        nrm = np.linalg.norm(w, axis=1)
        if np.any(nrm < 1e-14):
            raise DegenerateFrame("raw tangents are linearly dependent")
        lk = w / nrm[:, None]
        P = eye[None] - np.einsum("ni,nj->nij", lk, lk)
        L[:, k] = lk
        JL[:, k] = np.einsum("nij,njb->nib", P, Jw) / nrm[:, None, None]
    return L, JL


def _normal_from_raw(V: np.ndarray, J: np.ndarray):
    n, q, d = V.shape
    a = V[:, :, q]  # (N, q) vertical components
    v = np.column_stack([-a, np.ones(n)])
    s = np.sqrt(1.0 + np.sum(a * a, axis=1))
    da = J[:, :, q, :]  # (N, q, d)
    dv = np.zeros((n, d, d))
    dv[:, :q, :] = -da
    ds = np.einsum("nk,nkb->nb", a, da) / s[:, None]
    jac = dv / s[:, None, None] - v[:, :, None] * ds[:, None, :] / (s * s)[:, None, None]
    return v / s[:, None], jac


@dataclass
class FrameField:
    """Vectorised frame data: tangents ``(N, d-1, d)``, normals ``(N, d)``."""

    tangents: np.ndarray
    normals: np.ndarray
    tangent_jac: np.ndarray
    normal_jac: np.ndarray
    raw: np.ndarray
    raw_jac: np.ndarray
    region: np.ndarray


def frame_field(stack: InterfaceStack, x, strip=None) -> FrameField:
    V, J, r = _raw_fields(stack, x, strip)
    L, JL = _gram_schmidt(V, J)
    nv, Jn = _normal_from_raw(V, J)
    return FrameField(L, nv, JL, Jn, V, J, r)


@dataclass(frozen=True)
class FrameAtPoint:
    tangents: np.ndarray  # (d-1, d)
    normal: np.ndarray  # (d,)
    region: int
    matrix: np.ndarray = field(repr=False)  # rows (l^1, ..., l^{d-1}, n)


def _frame_at(tangents: np.ndarray, normal: np.ndarray, region: int) -> FrameAtPoint:
    return FrameAtPoint(tangents, normal, region, np.vstack([tangents, normal[None, :]]))


def raw_tangent(stack: InterfaceStack, k: int, x) -> np.ndarray:
    """Raw tangent ``l^{k,0}(x)``; vectorised over leading axis."""
    x = np.asarray(x, dtype=float)
    if not 1 <= k <= stack.dim - 1:
        raise GeometryError(f"tangent index {k} outside 1..{stack.dim - 1}")
    V, _, _ = _raw_fields(stack, np.atleast_2d(x))
    out = V[:, k - 1]
    return out[0] if x.ndim == 1 else out


def orthonormal_frame(stack: InterfaceStack, x) -> FrameAtPoint:
    x = np.asarray(x, dtype=float)
    ff = frame_field(stack, x[None, :])
    return _frame_at(ff.tangents[0], ff.normals[0], int(ff.region[0]))


def extended_tangent(stack: InterfaceStack, j: int, k: int, x) -> np.ndarray:
    """Smooth extension of ``l^k`` from donor region ``j`` to all of the domain."""
    if not 1 <= j <= stack.m + 1:
        raise GeometryError(f"region index {j} outside 1..{stack.m + 1}")
    x = np.asarray(x, dtype=float)
    ff = frame_field(stack, np.atleast_2d(x), strip=j)
    out = ff.tangents[:, k - 1]
    return out[0] if x.ndim == 1 else out


# ---------------------------------------------------------------------------
# projections and anchor frames


def _dist2_1d(h, xp0: float, xd0: float):
    def f(s):
        v = h.derivs(np.array([[s]]), 0)[0][0]
        return (s - xp0) ** 2 + (v - xd0) ** 2

    return f


def nearest_projection(stack: InterfaceStack, j: int, x, half_width: float = 0.5):
    """Closest point on ``Gamma_j`` to ``x``; returns ``(y0, distance)``.

    The search runs over the bracket ``x' +/- half_width`` (Brent in 2-D,
    coordinate sweeps in 3-D) and is polished with Newton steps using the
    exact interface derivatives.
    """
    if not 1 <= j <= stack.m:
        raise GeometryError(f"interface index {j} outside 1..{stack.m}")
    x = np.asarray(x, dtype=float)
    h = stack.interfaces[j - 1]
    q = stack.dim - 1
    xp0, xd0 = x[:q].copy(), x[q]
    lo, hi = xp0 - half_width, xp0 + half_width
    y = xp0.copy()
    sweeps = 1 if q == 1 else 6
    for _ in range(sweeps):
        for a in range(q):
            def f(s, a=a):
                yy = y.copy()
                yy[a] = s
                v = h.derivs(yy[None, :], 0)[0][0]
                return float(np.sum((yy - xp0) ** 2) + (v - xd0) ** 2)

            res = minimize_scalar(f, bounds=(lo[a], hi[a]), method="bounded", options={"xatol": 1e-12})
            y[a] = res.x
    # Newton polish on grad of 0.5 * |x - (y, h(y))|^2
    for _ in range(20):
        v, g, S = (o[0] for o in h.derivs(y[None, :], 2))
        res_v = v - xd0
        grad = (y - xp0) + res_v * g
        hess = np.eye(q) + np.outer(g, g) + res_v * S
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.linalg.eigvalsh(hess) > 0):
            break
        y = y - step
        if np.max(np.abs(step)) < 1e-15:
            break
    edge = np.minimum(y - lo, hi - y)
    if half_width > 0 and np.any(edge < 1e-9 * max(1.0, half_width)):
        raise BracketError(
            f"nearest point on interface {j} hit the bracket edge; widen half_width (was {half_width})"
        )
    yd = float(h.derivs(y[None, :], 0)[0][0])
    y0 = np.append(y, yd)
    return y0, float(np.linalg.norm(x - y0))


def _nearest_boundary_point(stack: InterfaceStack, x0: np.ndarray):
    """Closest point on the interior interfaces bounding the region of ``x0``."""
    j0 = int(stack.region_index(x0[None, :])[0])
    H = stack.heights(x0[None, :-1])[:, 0]
    best = None
    for j in (j0 - 1, j0):
        if not 1 <= j <= stack.m:
            continue
        vd = abs(x0[-1] - H[j - 1])
        y0, dist = nearest_projection(stack, j, x0, half_width=max(1.01 * vd, 1e-6))
        if best is None or dist < best[2]:
            best = (j, y0, dist)
    return j0, best


def frame_at_anchor(stack: InterfaceStack, x0) -> FrameAtPoint:
    """Coordinate frame attached to ``x0``.

    Rows of the matrix are ``tau_k = l^k(y0)`` and the interface normal at
    ``y0``, the nearest point of the boundary of the region holding ``x0``;
    ``y = Lambda x`` maps to the anchored coordinates.
    """
    x0 = np.asarray(x0, dtype=float)
    j0, best = _nearest_boundary_point(stack, x0)
    d = stack.dim
    if best is None:
        return _frame_at(np.eye(d)[:-1], np.eye(d)[-1], j0)
    j, y0, _ = best
    tau = frame_field(stack, y0[None, :]).tangents[0]
    n = interface_normal(stack, j, y0[:-1] if d == 3 else y0[0])
    return _frame_at(tau, np.asarray(n), j0)


def anchor_points(stack: InterfaceStack, x0, j0: int) -> list[np.ndarray]:
    """Points ``P_j x0``: the anchor itself in its own region, interface
    traces below/above it elsewhere."""
    x0 = np.asarray(x0, dtype=float)
    if not 1 <= j0 <= stack.m + 1:
        raise GeometryError(f"region index {j0} outside 1..{stack.m + 1}")
    H = stack.heights(x0[None, :-1])[:, 0]
    pts = []
    for j in range(1, stack.m + 2):
        if j == j0:
            pts.append(x0.copy())
        elif j < j0:
            pts.append(np.append(x0[:-1], H[j - 1]))
        else:
            pts.append(np.append(x0[:-1], H[j - 2]))
    return pts


# ---------------------------------------------------------------------------
# self-test


@dataclass
class GeometrySelftestReport:
    eps: float | None
    samples: int
    orthonormality_residual: float
    tangency_residual: float
    normal_match_residual: float
    frame_orthogonality_residual: float
    holder_half: float
    derivative_gap_product: float
    raw_vertical_derivative_sup: float
    slope_gap_constant: float
    jump_offsets: list[float]
    jumps: list[float]

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _sample_points(stack: InterfaceStack, n: int, rng: np.random.Generator, eps: float | None):
    """Stratified strip-coordinate grid plus seeded random points.

    Points are placed by (x', strip, fraction of strip height) so that thin
    strips receive as many samples as thick ones; x' is concentrated near the
    neck scale ``sqrt(eps)`` when a gap parameter is known.
    """
    q = stack.dim - 1
    nstrip = stack.m + 1
    n_grid = n // 2
    per = max(int(round((n_grid / nstrip) ** (1.0 / stack.dim))), 2)
    g = np.linspace(-0.999, 0.999, per)
    frac = (np.arange(per) + 0.5) / per
    if q == 1:
        XP = g[:, None]
    else:
        A, B = np.meshgrid(g, g, indexing="ij")
        XP = np.column_stack([A.ravel(), B.ravel()])
    pts = []
    for j in range(1, nstrip + 1):
        Bd = stack.bounds(XP)
        lo, hi = Bd[j - 1], Bd[j]
        for f in frac:
            pts.append(np.column_stack([XP, lo + f * (hi - lo)]))
    grid = np.vstack(pts)
    n_rand = max(n - len(grid), 0)
    xp = rng.uniform(-0.999, 0.999, size=(n_rand, q))
    if eps is not None and n_rand:
        conc = rng.random(n_rand) < 0.5
        scale = np.sqrt(eps) * 10.0 ** rng.uniform(-1.0, 1.0, size=(n_rand, q))
        sign = rng.choice([-1.0, 1.0], size=(n_rand, q))
        xp = np.where(conc[:, None], np.clip(sign * scale, -0.999, 0.999), xp)
    strip = rng.integers(1, nstrip + 1, size=n_rand)
    Bd = stack.bounds(xp)
    idx = np.arange(n_rand)
    lo, hi = Bd[strip - 1, idx], Bd[strip, idx]
    xd = lo + rng.random(n_rand) * (hi - lo)
    return np.vstack([grid, np.column_stack([xp, xd])])


def _jump_at_offsets(stack: InterfaceStack, xp: np.ndarray, offsets: Sequence[float]) -> list[float]:
    q = stack.dim - 1
    out = []
    for delta in offsets:
        worst = 0.0
        for j in range(1, stack.m + 1):
            h = stack.heights(xp)[j - 1]
            up = np.column_stack([xp, np.minimum(h + delta, 0.999999)])
            dn = np.column_stack([xp, np.maximum(h - delta, -0.999999)])
            fu, fd = frame_field(stack, up), frame_field(stack, dn)
            for k1 in range(q):
                for k2 in range(q):
                    du = np.einsum("nib,nb->ni", fu.tangent_jac[:, k2], fu.tangents[:, k1])
                    dd = np.einsum("nib,nb->ni", fd.tangent_jac[:, k2], fd.tangents[:, k1])
                    worst = max(worst, float(np.max(np.linalg.norm(du - dd, axis=1))))
        out.append(worst)
    return out


def geometry_selftest(
    stack_or_factory,
    budget: int = 10_000,
    eps_list: Sequence[float] | None = None,
    seed: int = DEFAULT_SEED,
    offsets: Sequence[float] = (1e-2, 1e-3, 1e-4),
) -> list[GeometrySelftestReport]:
    """Sampled checks of the frame-field regularity statements.

    ``stack_or_factory`` is either a stack or a callable ``eps -> stack``
    evaluated for every entry of ``eps_list``.
    """
    if budget < 1000:
        raise GeometryError("sample budget must be at least 1e3")
    if callable(stack_or_factory) and not isinstance(stack_or_factory, InterfaceStack):
        factory: Callable[[float], InterfaceStack] = stack_or_factory
        cases = [(e, factory(e)) for e in (eps_list or [])]
    else:
        cases = [(None, stack_or_factory)]
    reports = []
    for eps, stack in cases:
        rng = np.random.default_rng(seed)
        reports.append(_selftest_one(stack, budget, rng, eps, offsets))
    return reports


def _selftest_one(stack, budget, rng, eps, offsets) -> GeometrySelftestReport:
    d, q = stack.dim, stack.dim - 1
    X = _sample_points(stack, budget, rng, eps)
    ff = frame_field(stack, X)
    L, nv = ff.tangents, ff.normals
    gram = np.einsum("nki,nli->nkl", L, L) - np.eye(q)[None]
    ortho = max(float(np.max(np.abs(gram))), float(np.max(np.abs(np.einsum("nki,ni->nk", L, nv)))))

    # tangency and normal agreement on the interfaces
    tang, nmatch = 0.0, 0.0
    xp_s = X[: min(len(X), 2000), :q]
    for j in range(1, stack.m + 1):
        on = np.column_stack([xp_s, stack.heights(xp_s)[j - 1]])
        fo = frame_field(stack, on)
        nj = interface_normal(stack, j, xp_s)
        tang = max(tang, float(np.max(np.abs(np.einsum("nki,ni->nk", fo.tangents, nj)))))
        nmatch = max(nmatch, float(np.max(np.abs(fo.normals - nj))))

    # anchor frames
    fro = 0.0
    for x0 in X[rng.choice(len(X), size=min(50, len(X)), replace=False)]:
        try:
            lam = frame_at_anchor(stack, x0).matrix
        except GeometryError:
            continue
        fro = max(fro, float(np.max(np.abs(lam @ lam.T - np.eye(d)))))

    # Holder-1/2 quotient on multiscale pairs
    n_pairs = len(X)
    lo_scale = np.log10(eps) - 1.0 if eps else -4.0
    rho = 10.0 ** rng.uniform(lo_scale, 0.0, size=n_pairs)
    direc = rng.normal(size=(n_pairs, d))
    direc /= np.linalg.norm(direc, axis=1)[:, None]
    X2 = np.clip(X + rho[:, None] * direc, -0.999, 0.999)
    X2[:, :q] = np.clip(X2[:, :q], -0.999, 0.999)
    L2 = frame_field(stack, X2).tangents
    dist = np.linalg.norm(X - X2, axis=1)
    ok = dist > 0
    holder = float(np.max(np.linalg.norm(L - L2, axis=2)[ok] / np.sqrt(dist[ok])[:, None]))

    gap = stack.local_gap(X)
    jac_norm = np.sqrt(np.sum(ff.tangent_jac**2, axis=(2, 3)))  # (N, q)
    prod = float(np.max(jac_norm * np.sqrt(gap)[:, None]))
    raw_dd = float(np.max(np.abs(ff.raw_jac[:, :, q, q])))

    slope_c = 0.0
    if stack.m >= 2:
        xp_all = X[:, :q]
        _, G = stack.levels(xp_all, 1)[:2]
        H = stack.heights(xp_all)
        for j in range(1, stack.m):
            gp = H[j] - H[j - 1]
            pos = gp > 0
            dg = np.max(np.abs(G[j] - G[j - 1]), axis=1)
            slope_c = max(slope_c, float(np.max(dg[pos] / np.sqrt(gp[pos]))))

    xp_j = X[: min(len(X), 2000), :q]
    jumps = _jump_at_offsets(stack, xp_j, offsets) if stack.m else [0.0] * len(offsets)
    return GeometrySelftestReport(
        eps=eps,
        samples=len(X),
        orthonormality_residual=ortho,
        tangency_residual=tang,
        normal_match_residual=nmatch,
        frame_orthogonality_residual=fro,
        holder_half=holder,
        derivative_gap_product=prod,
        raw_vertical_derivative_sup=raw_dd,
        slope_gap_constant=slope_c,
        jump_offsets=list(offsets),
        jumps=jumps,
    )
