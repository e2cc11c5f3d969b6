"""Manufactured solutions for transmission problems.

Given a continuous, piecewise-smooth ``u*`` and per-region scalar
coefficients ``a_j``, the data

    f = a grad u* - F,   F = (0, int_{-1}^{y} u*_t ds)

make ``u*`` an exact solution of ``-u_t + div(a grad u) = div f`` with
continuous conormal flux ``n . (a grad u* - f) = n . F`` across every
interface.  In the elliptic case ``F = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import sympy as sp

from .fields import SYMBOLS, T, X, Y, SymbolicField, _as_expr, scalar_matrix
from .geometry import Cosine, InterfaceStack, Polynomial
from .solver import QUAD_BARY, CoefficientModel, FieldSolution, ForcingModel


def interface_expr(h) -> sp.Expr:
    """Sympy expression in ``x`` for a one-variable interface function."""
    if isinstance(h, Polynomial):
        if h.nvars != 1:
            raise ValueError("symbolic interfaces are available for d = 2 only")
        return sum(float(c) * X ** int(e[0]) for e, c in zip(h.exponents, h.coeffs))
    if isinstance(h, Cosine):
        return h.amplitude * sp.cos(float(h.omega[0]) * X + h.phase) + h.offset
    raise TypeError(f"no symbolic form for {type(h).__name__}")


class PiecewiseField:
    """Field that evaluates region ``j``'s component at points of region ``j``."""

    def __init__(self, stack: InterfaceStack, parts: Sequence):
        self.stack, self.parts = stack, list(parts)
        self.time_dependent = any(getattr(p, "time_dependent", False) for p in self.parts)

    def _dispatch(self, kind, t, x):
        x = np.atleast_2d(x)
        r = self.stack.region_index(x)
        out = None
        for j, p in enumerate(self.parts, start=1):
            sel = r == j
            if not np.any(sel):
                continue
            v = getattr(p, kind)(t, x[sel])
            if out is None:
                out = np.zeros((len(x),) + v.shape[1:])
            out[sel] = v
        return out

    def value(self, t, x):
        return self._dispatch("value", t, x)

    def grad(self, t, x):
        return self._dispatch("grad", t, x)

    def dt(self, t, x):
        return self._dispatch("dt", t, x)

    def describe(self):
        return [p.describe() for p in self.parts]


@dataclass
class ManufacturedProblem:
    stack: InterfaceStack
    u: list  # sympy expressions per region
    a: list  # scalar coefficient expressions per region
    parabolic: bool = False
    nu: float = 0.1

    def __post_init__(self):
        self.u = [_as_expr(e) for e in self.u]
        self.a = [_as_expr(e) for e in self.a]
        m = self.stack.m
        if len(self.u) != m + 1 or len(self.a) != m + 1:
            raise ValueError(f"need {m + 1} region expressions")
        self.h = [interface_expr(h) for h in self.stack.interfaces]
        for j, hj in enumerate(self.h):
            jump = sp.simplify((self.u[j + 1] - self.u[j]).subs(Y, hj))
            if jump != 0:
                raise ValueError(f"u* is discontinuous across interface {j + 1}: jump {jump}")
        self._exact = [SymbolicField(e) for e in self.u]

    def flux_correction(self) -> list:
        """Vertical component of ``F`` in each region."""
        if not self.parabolic:
            return [sp.Integer(0)] * len(self.u)
        s = sp.Symbol("s", real=True)
        lower = [sp.Integer(-1)] + self.h
        out, acc = [], sp.Integer(0)
        for j, uj in enumerate(self.u):
            ut = sp.diff(uj, T).subs(Y, s)
            out.append(sp.expand(acc + sp.integrate(ut, (s, lower[j], Y))))
            if j < len(self.h):
                acc = acc + sp.integrate(ut, (s, lower[j], self.h[j]))
        return out

    def coefficients(self) -> CoefficientModel:
        return CoefficientModel([scalar_matrix(a) for a in self.a], nu=self.nu)

    def forcing(self) -> ForcingModel:
        F = self.flux_correction()
        parts = []
        for uj, aj, Fj in zip(self.u, self.a, F):
            parts.append(SymbolicField([aj * sp.diff(uj, X), aj * sp.diff(uj, Y) - Fj]))
        exact = PiecewiseField(self.stack, self._exact)
        return ForcingModel(parts, dirichlet=exact, initial=exact if self.parabolic else None)

    def exact(self, t, x) -> np.ndarray:
        return PiecewiseField(self.stack, self._exact).value(t, x)

    def errors(self, solution: FieldSolution, step: int = -1) -> dict:
        """L2 and broken H1-seminorm errors by 3-point quadrature per element."""
        mesh = solution.mesh
        t = float(solution.times[step])
        p = mesh.vertices[mesh.triangles]
        qp = np.einsum("qk,ekd->eqd", QUAD_BARY, p)
        uh_q = np.einsum("qk,ek->eq", QUAD_BARY, solution.values[step][mesh.triangles])
        gh = solution.gradients(step)
        area = mesh.areas()
        e0 = np.zeros(len(area))
        e1 = np.zeros(len(area))
        for j, fld in enumerate(self._exact, start=1):
            sel = mesh.regions == j
            if not np.any(sel):
                continue
            pts = qp[sel].reshape(-1, 2)
            u = fld.value(t, pts).reshape(-1, 3)
            g = fld.grad(t, pts).reshape(-1, 3, 2)
            e0[sel] = np.mean((uh_q[sel] - u) ** 2, axis=1)
            e1[sel] = np.mean(np.sum((gh[sel][:, None, :] - g) ** 2, axis=2), axis=1)
        return {
            "l2": float(np.sqrt(np.sum(area * e0))),
            "energy": float(np.sqrt(np.sum(area * e1))),
            "max_nodal": float(np.max(np.abs(solution.values[step] - self.exact(t, mesh.vertices)))),
        }


def convergence_rates(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


__all__ = ["ManufacturedProblem", "PiecewiseField", "convergence_rates", "interface_expr", "SYMBOLS"]
