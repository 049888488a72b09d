"""Uniform simplicial meshes of the unit interval/square, quadrature rules and
P1 nodal functions.

Meshes are built by index arithmetic, so point location in :func:`evaluate`
needs no search structure.  The 2D mesh splits every subsquare along the
bottom-left to top-right diagonal, which gives a Delaunay (hence M-matrix)
stiffness matrix for the Laplacian.
"""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass
from functools import cached_property
from math import factorial

import numpy as np

__all__ = [
    "Mesh",
    "QuadratureRule",
    "FeFunction",
    "build_mesh",
    "quadrature_for_degree",
    "evaluate",
    "interpolate",
    "mesh_to_text",
    "mesh_from_text",
]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform triangulation of (0,1) or (0,1)^2.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    n_sub : int
        Subdivisions per side.
    vertices : ndarray, shape (n_vertices, dim)
    cells : ndarray, shape (n_cells, dim + 1)
        Vertex indices, counter-clockwise in 2D.
    boundary_nodes : ndarray
        Sorted indices of the vertices on the boundary.
    h : float
        Longest edge length.
    """

    dim: int
    n_sub: int
    vertices: np.ndarray
    cells: np.ndarray
    boundary_nodes: np.ndarray
    h: float

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_nodes] = False
        return _frozen(np.flatnonzero(mask), np.int64)

    @cached_property
    def cell_measures(self) -> np.ndarray:
        v = self.vertices[self.cells]
        if self.dim == 1:
            meas = v[:, 1, 0] - v[:, 0, 0]
        else:
            e1 = v[:, 1] - v[:, 0]
            e2 = v[:, 2] - v[:, 0]
            meas = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        return _frozen(meas, float)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the barycentric coordinates, shape (n_cells, dim+1, dim)."""
        v = self.vertices[self.cells]
        if self.dim == 1:
            inv = 1.0 / (v[:, 1, 0] - v[:, 0, 0])
            g = np.stack([-inv, inv], axis=1)[:, :, None]
        else:
            # x = v0 + J (l1, l2), so grad l1, grad l2 are the rows of J^-1
            jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
            g12 = np.linalg.inv(jac)
            g0 = -g12.sum(axis=1, keepdims=True)
            g = np.concatenate([g0, g12], axis=1)
        return _frozen(g, float)

    @cached_property
    def _pattern(self):
        k = self.dim + 1
        rows = np.repeat(self.cells, k, axis=1).ravel()
        cols = np.tile(self.cells, (1, k)).ravel()
        return rows, cols

    def _csr_layout(self, interior: bool):
        """(indptr, indices, scatter, mask) for assembling local matrices.

        ``scatter`` maps each retained local entry to its slot in the CSR
        data array; ``mask`` selects the retained entries.
        """
        key = "_layout_int" if interior else "_layout_full"
        if key not in self.__dict__:
            rows, cols = self._pattern
            n = self.n_vertices
            if interior:
                pos = np.full(n, -1)
                pos[self.interior_nodes] = np.arange(self.interior_nodes.size)
                rows, cols = pos[rows], pos[cols]
                mask = (rows >= 0) & (cols >= 0)
                rows, cols = rows[mask], cols[mask]
                n = self.interior_nodes.size
            else:
                mask = None
            uniq, scatter = np.unique(rows * n + cols, return_inverse=True)
            indptr = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(uniq // n, minlength=n), out=indptr[1:])
            self.__dict__[key] = (indptr, uniq % n, scatter.ravel(), mask, n)
        return self.__dict__[key]

    def quadrature_points(self, rule: QuadratureRule) -> np.ndarray:
        """Physical quadrature points, shape (n_cells, n_points, dim)."""
        return np.einsum("qa,cad->cqd", rule.points, self.vertices[self.cells])

    def coordinates(self, points: np.ndarray) -> tuple[np.ndarray, ...]:
        """Split an array (..., dim) into per-axis coordinate arrays."""
        return tuple(points[..., d] for d in range(self.dim))


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Quadrature on the reference simplex in barycentric coordinates.

    Weights sum to the reference measure (1 in 1D, 1/2 in 2D).
    """

    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def dim(self) -> int:
        return self.points.shape[1] - 1

    @property
    def reference_measure(self) -> float:
        return 1.0 / factorial(self.dim)


@dataclass(frozen=True, eq=False)
class FeFunction:
    """A P1 function given by its nodal values.

    ``zero_trace=True`` marks membership in the subspace vanishing on the
    boundary; the boundary entries are forced to zero on construction.
    """

    mesh: Mesh
    values: np.ndarray
    zero_trace: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.mesh.n_vertices,):
            raise ValueError(
                f"expected {self.mesh.n_vertices} nodal values, got shape {values.shape}"
            )
        if self.zero_trace:
            values[self.mesh.boundary_nodes] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def at(self, rule: QuadratureRule) -> np.ndarray:
        """Values at the quadrature points of every cell, shape (n_cells, n_points)."""
        return self.values[self.mesh.cells] @ rule.points.T

    def gradient(self) -> np.ndarray:
        """Cellwise constant gradient, shape (n_cells, dim)."""
        return np.einsum("ca,cad->cd", self.values[self.mesh.cells], self.mesh.basis_gradients)

    def __call__(self, point) -> float:
        return evaluate(self, point)


def build_mesh(dim: int, n_sub: int) -> Mesh:
    """Uniform mesh with ``n_sub`` subdivisions per side.

    >>> build_mesh(1, 2).vertices.ravel().tolist()
    [0.0, 0.5, 1.0]
    """
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if int(n_sub) != n_sub or n_sub < 2:
        raise ValueError(f"n_sub must be an integer >= 2, got {n_sub}")
    n = int(n_sub)
    if dim == 1:
        x = np.arange(n + 1) / n
        vertices = x[:, None]
        cells = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
        boundary = np.array([0, n])
        h = 1.0 / n
    else:
        t = np.arange(n + 1) / n
        X, Y = np.meshgrid(t, t, indexing="xy")
        vertices = np.stack([X.ravel(), Y.ravel()], axis=1)
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        v00 = (i + j * (n + 1)).ravel()
        v10, v01 = v00 + 1, v00 + n + 1
        v11 = v01 + 1
        lower = np.stack([v00, v10, v11], axis=1)
        upper = np.stack([v00, v11, v01], axis=1)
        # cell 2k is the lower triangle of subsquare k, 2k+1 the upper one
        cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
        on_bdry = np.any((vertices == 0.0) | (vertices == 1.0), axis=1)
        boundary = np.flatnonzero(on_bdry)
        h = np.sqrt(2.0) / n
    return Mesh(
        dim=dim,
        n_sub=n,
        vertices=_frozen(vertices, float),
        cells=_frozen(cells, np.int64),
        boundary_nodes=_frozen(boundary, np.int64),
        h=float(h),
    )


# --- quadrature -------------------------------------------------------------

def _orbit3(a: float) -> list[tuple[float, float, float]]:
    b = 1.0 - 2.0 * a
    return [(a, a, b), (a, b, a), (b, a, a)]


def _orbit6(a: float, b: float) -> list[tuple[float, float, float]]:
    c = 1.0 - a - b
    return sorted(set(itertools.permutations((a, b, c))))


def _symmetric(groups) -> tuple[np.ndarray, np.ndarray]:
    pts, wts = [], []
    for w, orbit in groups:
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    return np.array(pts), 0.5 * np.array(wts)


# Symmetric positive-weight triangle rules (weights normalised to area 1).
_TRIANGLE_RULES = {
    1: lambda: _symmetric([(1.0, [(1 / 3, 1 / 3, 1 / 3)])]),
    2: lambda: _symmetric([(1 / 3, _orbit3(1 / 6))]),
    4: lambda: _symmetric([
        (0.223381589678011, _orbit3(0.445948490915965)),
        (0.109951743655322, _orbit3(0.091576213509771)),
    ]),
    5: lambda: _symmetric([
        (0.225, [(1 / 3, 1 / 3, 1 / 3)]),
        (0.132394152788506, _orbit3(0.470142064105115)),
        (0.125939180544827, _orbit3(0.101286507323456)),
    ]),
    6: lambda: _symmetric([
        (0.116786275726379, _orbit3(0.249286745170910)),
        (0.050844906370207, _orbit3(0.063089014491502)),
        (0.082851075618374, _orbit6(0.053145049844817, 0.310352451033784)),
    ]),
}


def _gauss_interval(degree: int) -> QuadratureRule:
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    return QuadratureRule(
        points=_frozen(np.stack([1.0 - t, t], axis=1), float),
        weights=_frozen(0.5 * w, float),
        exact_degree=2 * n - 1,
    )


def _conical_triangle(degree: int) -> QuadratureRule:
    # collapsed Gauss (Stroud) product rule; positive weights, any degree
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    s, ws = 0.5 * (x + 1.0), 0.5 * w
    xj, wj = np.polynomial.legendre.leggauss(n + 1)
    t, wt = 0.5 * (xj + 1.0), 0.5 * wj
    pts, wts = [], []
    for ti, wti in zip(t, wt):
        for si, wsi in zip(s, ws):
            l1 = si * (1.0 - ti)
            l2 = ti
            pts.append((1.0 - l1 - l2, l1, l2))
            wts.append(wsi * wti * (1.0 - ti))
    return QuadratureRule(_frozen(pts, float), _frozen(wts, float), 2 * n - 1)


def quadrature_for_degree(dim: int, degree: int) -> QuadratureRule:
    """Positive-weight rule on the reference simplex exact up to ``degree``.

    1D uses Gauss-Legendre; 2D uses symmetric rules up to degree 6 and a
    collapsed Gauss product rule beyond that.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if dim == 1:
        return _gauss_interval(degree)
    if dim != 2:
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    for d in sorted(_TRIANGLE_RULES):
        if d >= max(degree, 1):
            pts, wts = _TRIANGLE_RULES[d]()
            return QuadratureRule(_frozen(pts, float), _frozen(wts, float), d)
    return _conical_triangle(degree)


def monomial_integral(exponents) -> float:
    """Exact integral of prod(lambda_i ** k_i) over the reference simplex."""
    k = list(exponents)
    d = len(k) - 1
    return float(np.prod([factorial(e) for e in k]) / factorial(sum(k) + d))


# --- evaluation --------------------------------------------------------------

_TOL = 1e-12


def _locate(mesh: Mesh, point) -> tuple[int, np.ndarray]:
    p = np.atleast_1d(np.asarray(point, dtype=float))
    if p.shape != (mesh.dim,):
        raise ValueError(f"point must have {mesh.dim} coordinates")
    if np.any(p < -_TOL) or np.any(p > 1.0 + _TOL):
        raise ValueError(f"point {p.tolist()} lies outside the closed unit domain")
    n = mesh.n_sub
    p = np.clip(p, 0.0, 1.0)
    idx = np.minimum((p * n).astype(int), n - 1)
    loc = p * n - idx
    if mesh.dim == 1:
        return int(idx[0]), np.array([1.0 - loc[0], loc[0]])
    s, t = loc
    square = int(idx[0] + idx[1] * n)
    if s >= t:
        return 2 * square, np.array([1.0 - s, s - t, t])
    return 2 * square + 1, np.array([1.0 - t, s, t - s])


def evaluate(f: FeFunction, point) -> float:
    """Value of a P1 function at ``point`` by barycentric interpolation."""
    cell, bary = _locate(f.mesh, point)
    return float(bary @ f.values[f.mesh.cells[cell]])


def interpolate(mesh: Mesh, g, zero_trace: bool = False) -> FeFunction:
    """Nodal interpolant of a constant or a callable ``g(x)`` / ``g(x, y)``."""
    if callable(g):
        values = np.broadcast_to(g(*mesh.coordinates(mesh.vertices)), (mesh.n_vertices,))
    else:
        values = np.full(mesh.n_vertices, float(g))
    return FeFunction(mesh, values, zero_trace=zero_trace)


# --- plain-text serialisation --------------------------------------------

def mesh_to_text(mesh: Mesh) -> str:
    """Serialise as a header line followed by vertex and cell blocks."""
    buf = io.StringIO()
    buf.write(f"mesh dim={mesh.dim} n_sub={mesh.n_sub}\n")
    buf.write(f"vertices {mesh.n_vertices}\n")
    np.savetxt(buf, mesh.vertices, fmt="%.17g")
    buf.write(f"cells {mesh.n_cells}\n")
    np.savetxt(buf, mesh.cells, fmt="%d")
    return buf.getvalue()


def mesh_from_text(text: str) -> Mesh:
    lines = text.splitlines()
    header = dict(kv.split("=") for kv in lines[0].split()[1:])
    dim, n_sub = int(header["dim"]), int(header["n_sub"])
    nv = int(lines[1].split()[1])
    vertices = np.loadtxt(lines[2:2 + nv], ndmin=2)
    nc = int(lines[2 + nv].split()[1])
    cells = np.loadtxt(lines[3 + nv:3 + nv + nc], dtype=np.int64, ndmin=2)
    ref = build_mesh(dim, n_sub)
    if not (np.array_equal(vertices, ref.vertices) and np.array_equal(cells, ref.cells)):
        raise ValueError("serialised mesh does not match the uniform mesh it claims to be")
    return ref
