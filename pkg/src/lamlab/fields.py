"""Analytic data fields ``(t, x) -> value`` with exact first derivatives.

Coefficients, forcing and boundary data are all expressed through the same
small interface: ``value(t, x)``, ``grad(t, x)`` (spatial derivative appended
as the last axis) and ``dt(t, x)``.  Constant fields are cheap; symbolic
fields are compiled from sympy expressions in ``t, x, y``.
"""
from __future__ import annotations

import numpy as np
import sympy as sp

T, X, Y = sp.symbols("t x y", real=True)
SYMBOLS = (T, X, Y)


class ConstantField:
    def __init__(self, value):
        self.const = np.asarray(value, dtype=float)
        self.shape = self.const.shape
        self.time_dependent = False

    def value(self, t, x):
        return np.broadcast_to(self.const, (len(x),) + self.shape).copy()

    def grad(self, t, x):
        return np.zeros((len(x),) + self.shape + (2,))

    def dt(self, t, x):
        return np.zeros((len(x),) + self.shape)

    def scaled(self, lam: float) -> "ConstantField":
        return ConstantField(lam * self.const)

    def describe(self):
        return self.const.tolist()


def _as_expr(e) -> sp.Expr:
    if isinstance(e, sp.Basic):
        return e
    return sp.sympify(e, locals={"t": T, "x": X, "y": Y})


class SymbolicField:
    """Field compiled from (nested lists of) sympy expressions in t, x, y."""

    def __init__(self, exprs):
        arr = np.array(exprs, dtype=object)
        self.shape = arr.shape
        flat = [_as_expr(e) for e in arr.ravel()]
        self.exprs = flat
        free = set().union(*(e.free_symbols for e in flat)) if flat else set()
        extra = free - set(SYMBOLS)
        if extra:
            raise ValueError(f"unknown symbols {sorted(map(str, extra))} in field expression")
        self.time_dependent = T in free
        self._val = [sp.lambdify(SYMBOLS, e, "numpy") for e in flat]
        self._dx = [sp.lambdify(SYMBOLS, sp.diff(e, X), "numpy") for e in flat]
        self._dy = [sp.lambdify(SYMBOLS, sp.diff(e, Y), "numpy") for e in flat]
        self._dt = [sp.lambdify(SYMBOLS, sp.diff(e, T), "numpy") for e in flat]

    @staticmethod
    def _eval(fns, t, x):
        n = len(x)
        out = np.empty((n, len(fns)))
        for i, f in enumerate(fns):
            out[:, i] = np.broadcast_to(f(t, x[:, 0], x[:, 1]), (n,))
        return out

    def value(self, t, x):
        return self._eval(self._val, t, x).reshape((len(x),) + self.shape)

    def grad(self, t, x):
        gx = self._eval(self._dx, t, x).reshape((len(x),) + self.shape)
        gy = self._eval(self._dy, t, x).reshape((len(x),) + self.shape)
        return np.stack([gx, gy], axis=-1)

    def dt(self, t, x):
        return self._eval(self._dt, t, x).reshape((len(x),) + self.shape)

    def scaled(self, lam: float) -> "SymbolicField":
        return SymbolicField(np.array([lam * e for e in self.exprs], dtype=object).reshape(self.shape).tolist()
                             if self.shape else lam * self.exprs[0])

    def describe(self):
        arr = np.array([str(e) for e in self.exprs], dtype=object).reshape(self.shape)
        return arr.tolist()


def scalar_matrix(a) -> SymbolicField | ConstantField:
    """Isotropic coefficient ``a(t, x) * I`` from a number or expression."""
    if isinstance(a, (int, float)):
        return ConstantField(float(a) * np.eye(2))
    e = _as_expr(a)
    if not e.free_symbols:
        return ConstantField(float(e) * np.eye(2))
    return SymbolicField([[e, 0], [0, e]])


def make_field(spec, shape=()):
    """Build a field from numbers, expression strings or nested lists of them."""
    arr = np.array(spec, dtype=object)
    if arr.shape != shape:
        raise ValueError(f"field expects shape {shape}, got {arr.shape}")
    exprs = [_as_expr(e) for e in arr.ravel()]
    if all(not e.free_symbols for e in exprs):
        return ConstantField(np.array([float(e) for e in exprs]).reshape(shape))
    return SymbolicField(np.array(exprs, dtype=object).reshape(shape).tolist() if shape else exprs[0])
