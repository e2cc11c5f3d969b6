"""Closed-form reference solutions shared by the tests."""
import numpy as np

from lamlab.fields import ConstantField
from lamlab.geometry import InterfaceStack, flat
from lamlab.solver import CoefficientModel, ForcingModel


class Field:
    """Scalar field given by a vectorised function of the points."""

    def __init__(self, fn):
        self.fn = fn
        self.time_dependent = False

    def value(self, t, x):
        return self.fn(np.atleast_2d(x))


def layered(levels, a):
    """Flat layers with constant conductivities, u(-1) = 0 and u(1) = 1.

    The flux s is constant across layers, so u is piecewise linear with
    slope s / a_j and s = 1 / sum(thickness_j / a_j).
    """
    edges = np.concatenate([[-1.0], levels, [1.0]])
    a = np.asarray(a, dtype=float)
    s = 1.0 / np.sum(np.diff(edges) / a)
    base = np.concatenate([[0.0], np.cumsum(s * np.diff(edges) / a)])

    def exact(x):
        y = np.atleast_2d(x)[:, 1]
        j = np.clip(np.searchsorted(edges, y, side="right") - 1, 0, len(a) - 1)
        return base[j] + s * (y - edges[j]) / a[j]

    stack = InterfaceStack([flat(c) for c in levels])
    coeff = CoefficientModel([ConstantField(v * np.eye(2)) for v in a], nu=min(a.min(), 1 / a.max()) / 2)
    forcing = ForcingModel([ConstantField([0.0, 0.0]) for _ in a], dirichlet=Field(exact))
    return stack, coeff, forcing, exact, s
