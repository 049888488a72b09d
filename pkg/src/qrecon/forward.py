"""Newton solver for the discrete semilinear problem

    find u_h in S_h^0:  a(u_h, v) + (q u_h^m, v) = (f, v)  for all v in S_h^0

with odd ``m`` and ``q >= 0``, plus the linearised (adjoint) solve.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    _load_from_values,
    _local_mass,
    _local_stiffness,
    _to_csr,
    at_quadrature,
    assemble_load,
    assemble_stiffness,
    solve_spd,
)
from .mesh import FeFunction, Mesh, quadrature_for_degree

__all__ = [
    "ForwardProblem",
    "NewtonReport",
    "ConvergenceError",
    "solve_forward",
    "solve_linearized",
    "residual",
]

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
MAX_HALVINGS = 30


class ConvergenceError(RuntimeError):
    """Raised when Newton's method exhausts its iteration budget."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class NewtonReport:
    iterations: int = 0
    residual_history: list[float] = field(default_factory=list)
    converged: bool = False


@dataclass
class ForwardProblem:
    """State equation data on a fixed mesh.

    ``q`` may be a float, callable or FeFunction; it must be nonnegative.
    Operators that do not depend on ``q`` are cached and shared by copies
    made with :meth:`with_q`.
    """

    mesh: Mesh
    f: object = 1.0
    q: object = 0.0
    m: int = 1
    sigma: object = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1 or self.m % 2 == 0:
            raise ValueError(f"m must be an odd positive integer, got {self.m}")
        self.m = int(self.m)

    def with_q(self, q) -> ForwardProblem:
        new = dataclasses.replace(self, q=q)
        new._cache = self._cache
        return new

    @property
    def rule(self):
        # exact for q_h u_h^m phi_i when q_h is P1
        if "rule" not in self._cache:
            self._cache["rule"] = quadrature_for_degree(self.mesh.dim, self.m + 2)
        return self._cache["rule"]

    @property
    def stiffness(self) -> sp.csr_matrix:
        if "K" not in self._cache:
            self._cache["K"] = assemble_stiffness(self.mesh, self.sigma)
        return self._cache["K"]

    @property
    def local_stiffness(self) -> np.ndarray:
        if "K_local" not in self._cache:
            self._cache["K_local"] = _local_stiffness(self.mesh, self.sigma)
        return self._cache["K_local"]

    @property
    def load(self) -> np.ndarray:
        if "F" not in self._cache:
            self._cache["F"] = assemble_load(self.mesh, self.f, degree=max(4, self.m + 2))
        return self._cache["F"]

    def q_at_quadrature(self) -> np.ndarray:
        qq = at_quadrature(self.q, self.mesh, self.rule)
        if np.min(qq) < 0.0:
            raise ValueError(f"q must be nonnegative, found {np.min(qq):g} at a quadrature point")
        return qq


def _nonlinear_term(p: ForwardProblem, qq: np.ndarray, u: np.ndarray) -> np.ndarray:
    uq = u[p.mesh.cells] @ p.rule.points.T
    return _load_from_values(p.mesh, p.rule, qq * uq**p.m)


class _Factor:
    """Factorised interior block of ``K + M_w``, reusable for several right-hand sides."""

    def __init__(self, p: ForwardProblem, qq: np.ndarray, u: np.ndarray | None):
        if p.m == 1:
            wq = qq
        else:
            uq = u[p.mesh.cells] @ p.rule.points.T
            wq = p.m * qq * uq ** (p.m - 1)
        local = p.local_stiffness + _local_mass(p.mesh, p.rule, wq)
        self.mesh = p.mesh
        self.matrix = _to_csr(p.mesh, local, interior=True)
        self._lu = None
        if self.matrix.shape[0] < 100_000:
            self._lu = spla.splu(sp.csc_matrix(self.matrix), permc_spec="MMD_AT_PLUS_A")

    def solve(self, b: np.ndarray) -> np.ndarray:
        idx = self.mesh.interior_nodes
        x = np.zeros(self.mesh.n_vertices)
        rhs = np.asarray(b, float)[idx]
        x[idx] = self._lu.solve(rhs) if self._lu is not None else solve_spd(self.matrix, rhs)
        return x


def _factor_key(p: ForwardProblem, u: np.ndarray | None):
    if not isinstance(p.q, FeFunction):
        return None
    key = p.q.values.tobytes()
    return key if p.m == 1 else key + np.asarray(u).tobytes()


def _factor(p: ForwardProblem, qq: np.ndarray, u: np.ndarray | None) -> _Factor:
    key = _factor_key(p, u)
    hit = p._cache.get("factor")
    if key is not None and hit is not None and hit[0] == key:
        return hit[1]
    fac = _Factor(p, qq, u)
    if key is not None:
        p._cache["factor"] = (key, fac)
    return fac


def residual(p: ForwardProblem, u, qq: np.ndarray | None = None) -> np.ndarray:
    """Residual ``K u + N(q, u) - F`` restricted to interior rows (boundary rows are 0)."""
    if qq is None:
        qq = p.q_at_quadrature()
    u = u.values if isinstance(u, FeFunction) else np.asarray(u, float)
    r = p.stiffness @ u + _nonlinear_term(p, qq, u) - p.load
    r[p.mesh.boundary_nodes] = 0.0
    return r


def solve_forward(p: ForwardProblem, tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER,
                  u0: FeFunction | np.ndarray | None = None) -> tuple[FeFunction, NewtonReport]:
    """Solve the discrete state equation by damped Newton iteration.

    Convergence is declared when ``||R|| <= tol ||F||`` or when the Newton
    update falls below ``tol`` relative to the iterate (the residual then
    sits at round-off level).  For ``m = 1`` a single linear solve is made.

    Without ``u0`` the initial guess for ``m > 1`` is the solution with the
    reaction term dropped.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    mesh = p.mesh
    qq = p.q_at_quadrature()
    F = p.load.copy()
    F[mesh.boundary_nodes] = 0.0
    fnorm = np.linalg.norm(F)
    report = NewtonReport()

    if p.m == 1:
        u = _factor(p, qq, None).solve(F)
        report.iterations = 1
        report.residual_history = [fnorm, float(np.linalg.norm(residual(p, u, qq)))]
        report.converged = True
        return FeFunction(mesh, u, zero_trace=True), report

    if u0 is not None:
        u = np.array(u0.values if isinstance(u0, FeFunction) else u0, dtype=float)
        u[mesh.boundary_nodes] = 0.0
    else:
        # reaction term dropped
        u = _Factor(p, np.zeros_like(qq), np.zeros(mesh.n_vertices)).solve(F)
    r = residual(p, u, qq)
    rnorm = float(np.linalg.norm(r))
    report.residual_history.append(rnorm)
    if rnorm <= tol * fnorm:
        report.converged = True
        return FeFunction(mesh, u, zero_trace=True), report

    for it in range(1, max_iter + 1):
        du = _Factor(p, qq, u).solve(-r)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = u + t * du
            r_trial = residual(p, trial, qq)
            rn_trial = float(np.linalg.norm(r_trial))
            if rn_trial < rnorm:
                break
            t *= 0.5
        step = t * np.linalg.norm(du)
        report.iterations = it
        if rn_trial >= rnorm:
            # no decrease possible: only acceptable at round-off level
            report.converged = bool(np.linalg.norm(du) <= 1e3 * tol * max(np.linalg.norm(u), 1.0))
            break
        u, r, rnorm = trial, r_trial, rn_trial
        report.residual_history.append(rnorm)
        if rnorm <= tol * fnorm or step <= tol * max(np.linalg.norm(u), 1e-300):
            report.converged = True
            break

    if not report.converged:
        raise ConvergenceError(
            f"Newton failed after {report.iterations} iterations (residual {rnorm:.3e})", report
        )
    return FeFunction(mesh, u, zero_trace=True), report


def solve_linearized(p: ForwardProblem, u_lin, rhs: np.ndarray) -> FeFunction:
    """Solve ``(K + M_w) z = rhs`` on the zero-trace space, ``w = m q u_lin^(m-1)``.

    ``rhs`` is a dual (load-type) vector over all nodes; boundary entries are
    ignored.
    """
    qq = p.q_at_quadrature()
    u = u_lin.values if isinstance(u_lin, FeFunction) else np.asarray(u_lin, float)
    z = _factor(p, qq, u).solve(rhs)
    return FeFunction(p.mesh, z, zero_trace=True)
