"""Interface-fitted structured triangulations of the layered square.

Each vertical column ``x'_i = -1 + 2 i / nx`` carries ``ny + 1`` nodes per
strip, uniformly graded between the interface heights bounding that strip.
Adjacent strips share their interface nodes, so every interface is a chain
of element edges no matter how thin the strip between two interfaces gets.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, InterfaceStack, OrderingViolation

log = logging.getLogger(__name__)

SIDES = ("bottom", "top", "left", "right")


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class MeshParams:
    nx: int = 64
    ny: int = 8
    eta_min: float = 1e-12
    dirichlet: tuple = SIDES

    def __post_init__(self):
        if self.nx < 2 or self.ny < 1 or not self.eta_min > 0:
            raise MeshError(f"invalid mesh parameters nx={self.nx} ny={self.ny} eta_min={self.eta_min}")

    def as_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "eta_min": self.eta_min, "dirichlet": list(self.dirichlet)}


@dataclass
class StripMesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3) counter-clockwise
    regions: np.ndarray  # (nt,) 1-based strip tags
    interface_edges: np.ndarray  # (ne, 5): v0, v1, interface j, elem below, elem above
    dirichlet: np.ndarray  # vertex indices
    params: MeshParams
    clamped: int = 0
    boundary: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return (int(self.regions.max()) if len(self.regions) else 1) * self.params.ny + 1

    @property
    def n_regions(self) -> int:
        return int(self.regions.max())

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def gradients(self) -> tuple[np.ndarray, np.ndarray]:
        """Constant P1 basis gradients per element, shape ``(nt, 3, 2)``, and areas."""
        p = self.vertices[self.triangles]
        x, y = p[:, :, 0], p[:, :, 1]
        area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        g = np.empty((len(p), 3, 2))
        g[:, 0, 0], g[:, 0, 1] = y[:, 1] - y[:, 2], x[:, 2] - x[:, 1]
        g[:, 1, 0], g[:, 1, 1] = y[:, 2] - y[:, 0], x[:, 0] - x[:, 2]
        g[:, 2, 0], g[:, 2, 1] = y[:, 0] - y[:, 1], x[:, 1] - x[:, 0]
        return g / area2[:, None, None], 0.5 * area2

    def vertex_regions(self) -> list[set]:
        out = [set() for _ in range(len(self.vertices))]
        for tri, r in zip(self.triangles, self.regions):
            for v in tri:
                out[v].add(int(r))
        return out

    # point location on the structured layout ------------------------------

    def locate(self, points) -> np.ndarray:
        """Element index containing each point (``-1`` outside)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        nx, R = self.params.nx, self.n_rows
        V = self.vertices.reshape(nx + 1, R, 2)
        xs = V[:, 0, 0]
        col = np.clip(np.searchsorted(xs, pts[:, 0], side="right") - 1, 0, nx - 1)
        t = (pts[:, 0] - xs[col]) / (xs[col + 1] - xs[col])
        ylines = (1.0 - t)[:, None] * V[col, :, 1] + t[:, None] * V[col + 1, :, 1]  # (N, R)
        row = np.sum(ylines <= pts[:, 1][:, None], axis=1) - 1
        row = np.clip(row, 0, R - 2)
        quad = col * (R - 1) + row
        # two triangles per quad, stored consecutively; pick by barycentric test
        out = np.full(len(pts), -1)
        for off in (0, 1):
            e = 2 * quad + off
            lam = self._barycentric(e, pts)
            inside = np.all(lam >= -1e-12, axis=1) & (out < 0)
            out[inside] = e[inside]
        return out

    def _barycentric(self, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
        p = self.vertices[self.triangles[elems]]
        T = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        rhs = pts - p[:, 0]
        l12 = np.linalg.solve(T, rhs[:, :, None])[:, :, 0]
        return np.column_stack([1.0 - l12.sum(axis=1), l12])

    def interpolate(self, nodal: np.ndarray, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        e = self.locate(pts)
        if np.any(e < 0):
            raise MeshError("point outside mesh")
        lam = self._barycentric(e, pts)
        return np.einsum("nk,nk->n", lam, nodal[self.triangles[e]])

    # serialisation ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "triangles": np.column_stack([self.triangles, self.regions]).tolist(),
            "interface_edges": self.interface_edges.tolist(),
            "dirichlet": self.dirichlet.tolist(),
            "params": self.params.as_dict(),
            "clamped": self.clamped,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StripMesh":
        tri = np.asarray(doc["triangles"], dtype=np.int64).reshape(-1, 4)
        p = doc.get("params", {})
        params = MeshParams(
            nx=int(p.get("nx", 2)),
            ny=int(p.get("ny", 1)),
            eta_min=float(p.get("eta_min", 1e-12)),
            dirichlet=tuple(p.get("dirichlet", SIDES)),
        )
        return cls(
            vertices=np.asarray(doc["vertices"], dtype=float).reshape(-1, 2),
            triangles=tri[:, :3].copy(),
            regions=tri[:, 3].copy(),
            interface_edges=np.asarray(doc["interface_edges"], dtype=np.int64).reshape(-1, 5),
            dirichlet=np.asarray(doc["dirichlet"], dtype=np.int64),
            params=params,
            clamped=int(doc.get("clamped", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def build_strip_mesh(stack: InterfaceStack, params: MeshParams = MeshParams()) -> StripMesh:
    if stack.dim != 2:
        raise MeshError("meshing is only available for d = 2")
    nx, ny, eta = params.nx, params.ny, params.eta_min
    m = stack.m
    R = (m + 1) * ny + 1
    xs = -1.0 + 2.0 * np.arange(nx + 1) / nx
    B = stack.bounds(xs[:, None])  # (m + 2, nx + 1)
    clamped = 0
    for j in range(1, m + 2):
        short = B[j] - B[j - 1]
        if np.any(short < -eta):
            i = int(np.argmin(short))
            raise OrderingViolation(f"interface {j} below interface {j - 1} at column x'={xs[i]:.6g}")
        need = B[j - 1] + ny * eta
        bad = B[j] < need
        if np.any(bad):
            clamped += int(np.sum(bad)) * ny
            B[j] = np.where(bad, need, B[j])
    if np.any(B[m + 1] > 1.0 + 1e-12) and m > 0 and clamped:
        raise MeshError("clamping pushed interfaces through the top boundary")
    if clamped:
        log.warning("clamped %d cells to minimal height %.3g", clamped, eta)

    frac = np.arange(ny + 1) / ny
    Y = np.empty((nx + 1, R))
    for j in range(m + 1):
        lo, hi = B[j], B[j + 1]
        Y[:, j * ny : (j + 1) * ny + 1] = lo[:, None] + frac[None, :] * (hi - lo)[:, None]
    X = np.repeat(xs[:, None], R, axis=1)
    verts = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, r):
        return i * R + r

    tris = np.empty((2 * nx * (R - 1), 3), dtype=np.int64)
    regs = np.empty(2 * nx * (R - 1), dtype=np.int64)
    k = 0
    for i in range(nx):
        for r in range(R - 1):
            bl, br, tr, tl = vid(i, r), vid(i + 1, r), vid(i + 1, r + 1), vid(i, r + 1)
            d1 = np.sum((verts[tr] - verts[bl]) ** 2)
            d2 = np.sum((verts[tl] - verts[br]) ** 2)
            if d1 <= d2:
                tris[k], tris[k + 1] = (bl, br, tr), (bl, tr, tl)
            else:
                tris[k], tris[k + 1] = (bl, br, tl), (br, tr, tl)
            regs[k] = regs[k + 1] = r // ny + 1
            k += 2

    edges = []
    for j in range(1, m + 1):
        r = j * ny
        for i in range(nx):
            a, b = vid(i, r), vid(i + 1, r)
            below = _quad_elem_with_edge(tris, i, r - 1, R, a, b)
            above = _quad_elem_with_edge(tris, i, r, R, a, b)
            edges.append((a, b, j, below, above))

    boundary = {
        "bottom": np.array([vid(i, 0) for i in range(nx + 1)]),
        "top": np.array([vid(i, R - 1) for i in range(nx + 1)]),
        "left": np.array([vid(0, r) for r in range(R)]),
        "right": np.array([vid(nx, r) for r in range(R)]),
    }
    unknown = set(params.dirichlet) - set(SIDES)
    if unknown:
        raise MeshError(f"unknown boundary sides {sorted(unknown)}")
    dirichlet = np.unique(np.concatenate([boundary[s] for s in params.dirichlet] or [np.array([], int)]))
    return StripMesh(
        vertices=verts,
        triangles=tris,
        regions=regs,
        interface_edges=np.array(edges, dtype=np.int64).reshape(-1, 5),
        dirichlet=dirichlet.astype(np.int64),
        params=params,
        clamped=clamped,
        boundary=boundary,
    )


def _quad_elem_with_edge(tris, i, r, R, a, b) -> int:
    base = 2 * (i * (R - 1) + r)
    for e in (base, base + 1):
        if a in tris[e] and b in tris[e]:
            return e
    raise GeometryError("interface edge not found in adjacent quad")


@dataclass
class MeshQuality:
    min_area: float
    max_area: float
    min_angle_deg: float
    max_aspect_ratio: float
    clamped: int
    strip_min_gap: list

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def mesh_quality(mesh: StripMesh) -> MeshQuality:
    area = mesh.areas()
    p = mesh.vertices[mesh.triangles]
    edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    lens = np.linalg.norm(edges, axis=2)
    angles = []
    for a in range(3):
        u, v = -edges[:, a - 1], edges[:, a]
        c = np.einsum("ni,ni->n", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        angles.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    min_angle = float(np.min(np.stack(angles)))
    aspect = float(np.max(lens.max(axis=1) / lens.min(axis=1)))
    nx, R, ny = mesh.params.nx, mesh.n_rows, mesh.params.ny
    Y = mesh.vertices[:, 1].reshape(nx + 1, R)
    gaps = [float(np.min(Y[:, (j + 1) * ny] - Y[:, j * ny])) for j in range((R - 1) // ny)]
    return MeshQuality(
        min_area=float(area.min()),
        max_area=float(area.max()),
        min_angle_deg=min_angle,
        max_aspect_ratio=aspect,
        clamped=mesh.clamped,
        strip_min_gap=gaps,
    )
