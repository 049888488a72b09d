"""Sparse P1 operators, projections and discrete norms.

Coefficients are passed as a float, an array-valued callable ``g(x)`` (1D)
or ``g(x, y)`` (2D) acting on coordinate arrays, or a :class:`FeFunction`.
A diffusion coefficient may also be a constant ``dim x dim`` matrix or a
callable returning an array of shape ``(dim, dim, *x.shape)``.
"""
from __future__ import annotations

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import FeFunction, Mesh, QuadratureRule, quadrature_for_degree

__all__ = [
    "EllipticityError",
    "at_quadrature",
    "assemble_stiffness",
    "assemble_mass",
    "assemble_load",
    "apply_dirichlet",
    "solve_spd",
    "l2_project",
    "ritz_project",
    "quasi_interpolate",
    "norm",
    "dual_norm",
    "export_matrix_market",
]

NORM_DEGREE = 6
CG_THRESHOLD = 100_000


class EllipticityError(ValueError):
    """Diffusion coefficient not uniformly positive definite at some point."""

    def __init__(self, point, value):
        self.point = np.asarray(point)
        self.value = value
        super().__init__(
            f"diffusion coefficient not elliptic at x={self.point.tolist()} (min eigenvalue {value:g})"
        )


def at_quadrature(coef, mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    """Evaluate a scalar coefficient at quadrature points, shape (n_cells, n_points)."""
    shape = (mesh.n_cells, rule.points.shape[0])
    if isinstance(coef, FeFunction):
        if coef.mesh is not mesh and coef.mesh.n_vertices != mesh.n_vertices:
            raise ValueError("FeFunction lives on a different mesh")
        return coef.at(rule)
    if callable(coef):
        xq = mesh.quadrature_points(rule)
        return np.broadcast_to(np.asarray(coef(*mesh.coordinates(xq)), dtype=float), shape)
    return np.full(shape, float(coef))


def _sigma_tensor(sigma, mesh: Mesh, rule: QuadratureRule, lower_bound: float) -> np.ndarray:
    """Diffusion tensor at quadrature points, shape (n_cells, n_points, dim, dim)."""
    d = mesh.dim
    nq = rule.points.shape[0]
    if not isinstance(sigma, FeFunction) and not callable(sigma) and np.ndim(sigma) == 2:
        S = np.broadcast_to(np.asarray(sigma, float), (mesh.n_cells, nq, d, d))
    elif callable(sigma) and not isinstance(sigma, FeFunction):
        xq = mesh.quadrature_points(rule)
        val = np.asarray(sigma(*mesh.coordinates(xq)), dtype=float)
        if val.ndim == 4:
            S = np.moveaxis(val, (0, 1), (2, 3))
        else:
            s = np.broadcast_to(val, (mesh.n_cells, nq))
            S = s[..., None, None] * np.eye(d)
    else:
        s = at_quadrature(sigma, mesh, rule)
        S = s[..., None, None] * np.eye(d)
    eig = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))[..., 0]
    bad = eig < lower_bound if lower_bound > 0 else eig <= 0.0
    if np.any(bad):
        c, q = np.argwhere(bad)[0]
        raise EllipticityError(mesh.quadrature_points(rule)[c, q], float(eig[c, q]))
    return S


def _to_csr(mesh: Mesh, local: np.ndarray, interior: bool = False) -> sp.csr_matrix:
    """Sum cell matrices (n_cells, k, k) into a global CSR matrix.

    With ``interior=True`` only rows/columns of interior nodes are kept,
    numbered in the order of ``mesh.interior_nodes``.
    """
    indptr, indices, scatter, mask, n = mesh._csr_layout(interior)
    vals = local.ravel() if mask is None else local.ravel()[mask]
    data = np.bincount(scatter, weights=vals, minlength=indices.size)
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


def assemble_stiffness(mesh: Mesh, sigma=1.0, degree: int = 2, lower_bound: float = 0.0) -> sp.csr_matrix:
    """Stiffness matrix of ``a(u, v) = int sigma grad u . grad v`` over all nodes.

    Raises :class:`EllipticityError` if sigma is not positive definite (or
    falls below ``lower_bound``) at a quadrature point.
    """
    return _to_csr(mesh, _local_stiffness(mesh, sigma, degree, lower_bound))


def _local_stiffness(mesh: Mesh, sigma=1.0, degree: int = 2, lower_bound: float = 0.0) -> np.ndarray:
    rule = quadrature_for_degree(mesh.dim, degree)
    S = _sigma_tensor(sigma, mesh, rule, lower_bound)
    Sbar = np.einsum("q,cqij->cij", rule.weights, S) / rule.reference_measure
    G = mesh.basis_gradients
    return np.einsum("c,cai,cij,cbj->cab", mesh.cell_measures, G, Sbar, G)


def _local_mass(mesh: Mesh, rule: QuadratureRule, wq: np.ndarray) -> np.ndarray:
    # product tensor of basis values is cached per rule
    key = ("phiphi", id(rule))
    cache = mesh.__dict__.setdefault("_phiphi", {})
    if key not in cache:
        cache[key] = (rule, np.einsum("q,qa,qb->qab", rule.weights, rule.points, rule.points)
                      / rule.reference_measure)
    pp = cache[key][1]
    return mesh.cell_measures[:, None, None] * np.tensordot(wq, pp, axes=(1, 0))


def _mass_from_values(mesh: Mesh, rule: QuadratureRule, wq: np.ndarray) -> sp.csr_matrix:
    return _to_csr(mesh, _local_mass(mesh, rule, wq))


def assemble_mass(mesh: Mesh, weight=1.0, degree: int | None = None) -> sp.csr_matrix:
    """Weighted mass matrix ``M_ij = int w phi_i phi_j``.

    The default quadrature is exact for P1 weights; pass ``degree`` for
    nonpolynomial weights.
    """
    if degree is None:
        degree = 3 if isinstance(weight, FeFunction) else (2 if not callable(weight) else 4)
    rule = quadrature_for_degree(mesh.dim, degree)
    return _mass_from_values(mesh, rule, at_quadrature(weight, mesh, rule))


def assemble_load(mesh: Mesh, f, degree: int = 4) -> np.ndarray:
    """Load vector ``b_i = int f phi_i``."""
    rule = quadrature_for_degree(mesh.dim, degree)
    return _load_from_values(mesh, rule, at_quadrature(f, mesh, rule))


def _load_from_values(mesh: Mesh, rule: QuadratureRule, fq: np.ndarray) -> np.ndarray:
    scale = mesh.cell_measures / rule.reference_measure
    local = np.einsum("c,q,cq,qa->ca", scale, rule.weights, fq, rule.points)
    return np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def apply_dirichlet(A: sp.spmatrix, rhs: np.ndarray, boundary_nodes) -> tuple[sp.csr_matrix, np.ndarray]:
    """Symmetric elimination of homogeneous Dirichlet rows and columns.

    Boundary rows and columns are zeroed, their diagonal set to one and the
    corresponding right-hand side entries set to zero.
    """
    n = A.shape[0]
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    rhs = np.array(rhs, dtype=float)
    if rhs.shape != (n,):
        raise ValueError(f"rhs has length {rhs.shape}, expected {n}")
    bnd = np.asarray(sorted(boundary_nodes), dtype=np.int64)
    if bnd.size == 0:
        return sp.csr_matrix(A), rhs
    if bnd.min() < 0 or bnd.max() >= n:
        raise IndexError("boundary node index out of range")
    keep = np.ones(n)
    keep[bnd] = 0.0
    D = sp.diags(keep)
    fix = np.zeros(n)
    fix[bnd] = 1.0
    A_bc = (D @ A @ D + sp.diags(fix)).tocsr()
    A_bc.eliminate_zeros()
    rhs[bnd] = 0.0
    return A_bc, rhs


def solve_spd(A: sp.spmatrix, b: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Solve an SPD system: sparse direct below ``CG_THRESHOLD`` unknowns, Jacobi-CG above."""
    A = sp.csc_matrix(A)
    if A.shape[0] < CG_THRESHOLD:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(np.asarray(b, float))
    Minv = sp.diags(1.0 / A.diagonal())
    x, info = spla.cg(A, b, rtol=rtol, atol=0.0, M=Minv, maxiter=10 * A.shape[0])
    if info != 0:
        raise RuntimeError(f"conjugate gradient failed to converge (info={info})")
    return x


def _solve_interior(A: sp.spmatrix, b: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Solve on the zero-trace subspace; boundary entries of the result are 0."""
    idx = mesh.interior_nodes
    A = sp.csr_matrix(A)
    x = np.zeros(mesh.n_vertices)
    x[idx] = solve_spd(A[idx][:, idx], np.asarray(b)[idx])
    return x


def l2_project(mesh: Mesh, g, degree: int = NORM_DEGREE) -> FeFunction:
    """L2 projection onto the full P1 space."""
    rule = quadrature_for_degree(mesh.dim, degree)
    b = _load_from_values(mesh, rule, at_quadrature(g, mesh, rule))
    M = assemble_mass(mesh)
    return FeFunction(mesh, solve_spd(M, b))


def _grad_at_quadrature(grad, mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    """Gradient of a coefficient at quadrature points, shape (n_cells, n_points, dim)."""
    nq = rule.points.shape[0]
    if isinstance(grad, FeFunction):
        return np.broadcast_to(grad.gradient()[:, None, :], (mesh.n_cells, nq, mesh.dim))
    xq = mesh.quadrature_points(rule)
    val = grad(*mesh.coordinates(xq))
    if mesh.dim == 1 and not isinstance(val, (tuple, list)):
        val = [val]
    return np.stack([np.broadcast_to(v, (mesh.n_cells, nq)) for v in val], axis=-1)


def ritz_project(mesh: Mesh, sigma, w, grad_w=None, degree: int = NORM_DEGREE) -> FeFunction:
    """Energy projection onto the zero-trace P1 space.

    For a callable ``w`` its gradient ``grad_w`` is required; it returns the
    derivative array in 1D and a ``(gx, gy)`` pair in 2D.
    """
    rule = quadrature_for_degree(mesh.dim, degree)
    if isinstance(w, FeFunction):
        gq = _grad_at_quadrature(w, mesh, rule)
    elif callable(w):
        if grad_w is None:
            raise ValueError("ritz_project needs grad_w for a callable w")
        gq = _grad_at_quadrature(grad_w, mesh, rule)
    else:
        gq = np.zeros((mesh.n_cells, rule.points.shape[0], mesh.dim))
    S = _sigma_tensor(sigma, mesh, rule, 0.0)
    flux = np.einsum("cqij,cqj->cqi", S, gq)
    scale = mesh.cell_measures / rule.reference_measure
    local = np.einsum("c,q,cqi,cai->ca", scale, rule.weights, flux, mesh.basis_gradients)
    b = np.bincount(mesh.cells.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)
    K = assemble_stiffness(mesh, sigma)
    return FeFunction(mesh, _solve_interior(K, b, mesh), zero_trace=True)


def quasi_interpolate(mesh: Mesh, g, degree: int = NORM_DEGREE) -> FeFunction:
    """Patch-averaging quasi-interpolant: node value = int(phi_i g) / int(phi_i)."""
    rule = quadrature_for_degree(mesh.dim, degree)
    num = _load_from_values(mesh, rule, at_quadrature(g, mesh, rule))
    den = _load_from_values(mesh, rule, np.ones((mesh.n_cells, rule.points.shape[0])))
    return FeFunction(mesh, num / den)


def _difference_at(f, reference, mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    val = at_quadrature(f, mesh, rule)
    if reference is not None:
        val = val - at_quadrature(reference, mesh, rule)
    return val


def norm(f, kind: str = "L2", mesh: Mesh | None = None, reference=None, reference_grad=None,
         degree: int = NORM_DEGREE) -> float:
    """Norm of ``f`` or of the difference ``f - reference``.

    Parameters
    ----------
    f : FeFunction, callable or float
    kind : {"L2", "H1", "H1_semi", "Linf", "Hminus1_discrete"}
        ``Linf`` samples vertices and cell midpoints.  ``Hminus1_discrete``
        is the norm of ``v -> int f v`` dual to H1_0, measured on the
        zero-trace P1 space via the (K + M) Riesz map.
    mesh : Mesh, optional
        Taken from ``f`` when it is a :class:`FeFunction`.
    reference, reference_grad : optional
        Subtrahend and (for H1 kinds) its gradient.
    """
    if mesh is None:
        if not isinstance(f, FeFunction):
            raise ValueError("mesh is required unless f is a FeFunction")
        mesh = f.mesh
    rule = quadrature_for_degree(mesh.dim, degree)
    scale = mesh.cell_measures / rule.reference_measure

    def l2sq():
        d = _difference_at(f, reference, mesh, rule)
        return float(np.einsum("c,q,cq->", scale, rule.weights, d * d))

    def semisq():
        if isinstance(f, FeFunction):
            g = _grad_at_quadrature(f, mesh, rule)
        elif callable(f):
            raise ValueError("H1 norms of callables need an FeFunction operand")
        else:
            g = np.zeros((mesh.n_cells, rule.points.shape[0], mesh.dim))
        if reference is not None:
            if isinstance(reference, FeFunction):
                g = g - _grad_at_quadrature(reference, mesh, rule)
            elif callable(reference):
                if reference_grad is None:
                    raise ValueError("reference_grad is required for H1 norms of a callable reference")
                g = g - _grad_at_quadrature(reference_grad, mesh, rule)
        return float(np.einsum("c,q,cq->", scale, rule.weights, (g * g).sum(axis=-1)))

    if kind == "L2":
        return np.sqrt(l2sq())
    if kind == "H1":
        return np.sqrt(l2sq() + semisq())
    if kind == "H1_semi":
        return np.sqrt(semisq())
    if kind == "Linf":
        mid = np.full((1, mesh.dim + 1), 1.0 / (mesh.dim + 1))
        nodal = np.eye(mesh.dim + 1)
        sample = QuadratureRule(np.vstack([nodal, mid]), np.ones(mesh.dim + 2), 0)
        return float(np.max(np.abs(_difference_at(f, reference, mesh, sample))))
    if kind == "Hminus1_discrete":
        return dual_norm(mesh, _load_from_values(mesh, rule, _difference_at(f, reference, mesh, rule)))
    raise ValueError(f"unknown norm kind {kind!r}")


def dual_norm(mesh: Mesh, b: np.ndarray) -> float:
    """Norm of the functional ``v -> b . v`` on the zero-trace space w.r.t. the H1 norm."""
    A = assemble_stiffness(mesh) + assemble_mass(mesh)
    z = _solve_interior(A, b, mesh)
    return float(np.sqrt(max(b @ z, 0.0)))


def export_matrix_market(A: sp.spmatrix, path) -> None:
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(A))
