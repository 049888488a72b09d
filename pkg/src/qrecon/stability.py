"""Numerical probes of the analytical predictions.

* :func:`check_lower_bound` compares the discrete state with a power of
  the boundary distance, ``u >= c rho**gamma``.
* :func:`scan_stability` samples admissible coefficients around the exact
  one and fits the constant of the Hoelder-type stability estimate
  ``||q - q_ref||_L2 <= C ||u(q) - u(q_ref)||_H1 ** (1 / (1 + kappa))``.
* :func:`verify_identity_mB` checks the factorisation of ``a**m - b**m``
  that underlies the monotonicity of the nonlinearity.

A *setup* is any object with attributes ``dim``, ``f``, ``m``, ``sigma``
(a :class:`qrecon.experiments.ManufacturedCase` qualifies); the scan also
uses ``q_exact``, ``q_lower`` and ``q_upper``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .assembly import norm
from .experiments import _atomic_write
from .forward import ForwardProblem, solve_forward
from .mesh import FeFunction, Mesh, build_mesh, interpolate

__all__ = [
    "StabilitySample",
    "ExponentFit",
    "distance_to_boundary",
    "theory_gamma",
    "check_lower_bound",
    "prolongate",
    "scan_stability",
    "write_samples_csv",
    "verify_identity_mB",
]

AMPLITUDES = np.geomspace(1e-2, 0.5, 8)
N_MODES = 4


def distance_to_boundary(mesh: Mesh) -> np.ndarray:
    """Exact distance of every vertex to the boundary of the unit interval/square."""
    v = mesh.vertices
    return np.minimum(v, 1.0 - v).min(axis=1)


def theory_gamma(m: int) -> float:
    """Boundary decay exponent: 2 for ``m = 1`` and ``2 + 1/(m-1)`` otherwise."""
    return 2.0 if m == 1 else 2.0 + 1.0 / (m - 1)


def _forward(setup, mesh: Mesh, q) -> FeFunction:
    u, _ = solve_forward(ForwardProblem(mesh, f=setup.f, q=q, m=setup.m, sigma=setup.sigma))
    return u


def check_lower_bound(setup, q, gamma: float, n_sub: int, threshold: float = 1e-3) -> tuple[bool, float]:
    """Test ``u_h(q) >= threshold * rho**gamma`` at the interior nodes.

    Parameters
    ----------
    setup
        Forward data (``dim``, ``f``, ``m``, ``sigma``); ``f`` should be
        bounded below by a positive constant for the bound to be meaningful.
    q : float, callable or FeFunction
    gamma : float
    n_sub : int
        Mesh resolution of the forward solve.
    threshold : float
        Positive level the minimum ratio must reach.

    Returns
    -------
    passed : bool
    worst_ratio : float
        ``min u_h(x) / rho(x)**gamma`` over interior nodes.
    """
    mesh = build_mesh(setup.dim, n_sub)
    u = _forward(setup, mesh, q)
    idx = mesh.interior_nodes
    ratio = u.values[idx] / distance_to_boundary(mesh)[idx] ** gamma
    worst = float(ratio.min())
    return worst >= threshold, worst


def prolongate(f: FeFunction, fine: Mesh) -> FeFunction:
    """Evaluate a P1 function at the vertices of another mesh of the same domain."""
    coarse = f.mesh
    n = coarse.n_sub
    v = f.values
    if coarse.dim == 1:
        return FeFunction(fine, np.interp(fine.vertices[:, 0], coarse.vertices[:, 0], v))
    x, y = fine.vertices[:, 0] * n, fine.vertices[:, 1] * n
    i = np.minimum(np.floor(x).astype(int), n - 1)
    j = np.minimum(np.floor(y).astype(int), n - 1)
    s, t = x - i, y - j
    k = j * (n + 1) + i
    v00, v10, v01, v11 = v[k], v[k + 1], v[k + n + 1], v[k + n + 2]
    lower = v00 + s * (v10 - v00) + t * (v11 - v10)
    upper = v00 + t * (v01 - v00) + s * (v11 - v01)
    return FeFunction(fine, np.where(t <= s, lower, upper))


@dataclass(frozen=True)
class StabilitySample:
    index: int
    amplitude: float
    q: FeFunction = field(repr=False)
    misfit_state: float
    misfit_coeff_L2: float
    misfit_coeff_Hm1: float
    ratio: float


@dataclass(frozen=True)
class ExponentFit:
    kappa_theory: float
    exponent_theory: float
    constant_fitted: float
    max_ratio: float
    n_samples: int
    samples: tuple = field(default=(), repr=False)


def _direction(mesh: Mesh, rng: np.random.Generator) -> np.ndarray:
    """Random combination of the lowest sine modes, unit L2 norm."""
    k = np.arange(1, N_MODES + 1)
    if mesh.dim == 1:
        x = mesh.vertices[:, 0]
        vals = np.sin(np.pi * np.outer(x, k)) @ rng.standard_normal(N_MODES)
    else:
        x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
        c = rng.standard_normal((N_MODES, N_MODES))
        sx, sy = np.sin(np.pi * np.outer(x, k)), np.sin(np.pi * np.outer(y, k))
        vals = np.einsum("pk,pl,kl->p", sx, sy, c)
    d = FeFunction(mesh, vals)
    return vals / norm(d, "L2")


def scan_stability(setup, n_samples: int, seed: int, fine_n_sub: int, coarse_n_sub: int = 64,
                   gamma: float | None = None) -> ExponentFit:
    """Fit the stability constant over random admissible perturbations.

    Sample ``i`` is ``clip(I q_exact + a_i d_i, q_lower, q_upper)`` on the
    coarse mesh, where ``d_i`` is a random low-frequency sine combination of
    unit L2 norm and ``a_i`` cycles over eight log-spaced amplitudes from
    1e-2 to 0.5.  States are computed on the fine mesh.  With
    ``kappa = (m + 1) gamma`` the returned constant is the largest ratio
    ``||q - q_exact||_L2 / ||u(q) - u(q_exact)||_H1 ** (1 / (1 + kappa))``.

    Raises
    ------
    ValueError
        If ``n_samples < 10`` or a state misfit is below ``10 h_fine**2``,
        where discretisation error would pollute the quotient.
    """
    if n_samples < 10:
        raise ValueError("n_samples must be at least 10")
    gamma = theory_gamma(setup.m) if gamma is None else gamma
    kappa = (setup.m + 1) * gamma
    expo = 1.0 / (1.0 + kappa)
    coarse = build_mesh(setup.dim, coarse_n_sub)
    fine = build_mesh(setup.dim, fine_n_sub)
    base = interpolate(coarse, setup.q_exact).values
    u_ref = _forward(setup, fine, setup.q_exact)
    rng = np.random.default_rng(seed)
    floor = 10.0 * fine.h**2

    samples = []
    for i in range(n_samples):
        a = float(AMPLITUDES[i % len(AMPLITUDES)])
        qc = FeFunction(coarse, np.clip(base + a * _direction(coarse, rng), setup.q_lower, setup.q_upper))
        qf = prolongate(qc, fine)
        u = _forward(setup, fine, qf)
        ms = norm(u, "H1", reference=u_ref)
        if ms < floor:
            raise ValueError(
                f"state misfit {ms:.3e} is below 10*h^2 = {floor:.3e}; increase fine_n_sub"
            )
        l2 = norm(qf, "L2", reference=setup.q_exact)
        hm1 = norm(qf, "Hminus1_discrete", reference=setup.q_exact)
        samples.append(StabilitySample(i, a, qc, ms, l2, hm1, l2 / ms**expo))
    top = max(s.ratio for s in samples)
    return ExponentFit(kappa, expo, top, top, n_samples, tuple(samples))


def write_samples_csv(samples, path):
    """CSV of (sample index, amplitude, state misfit, coefficient L2 misfit, ratio)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "amplitude", "misfit_state", "misfit_coeff_L2", "ratio"])
    for s in samples:
        w.writerow([s.index, f"{s.amplitude:.5e}", f"{s.misfit_state:.5e}",
                    f"{s.misfit_coeff_L2:.5e}", f"{s.ratio:.5e}"])
    return _atomic_write(path, buf.getvalue())


def verify_identity_mB(m: int, trials: int = 10_000, seed: int = 0) -> bool:
    """Check ``a**m - b**m = S (a - b)`` with ``S = sum_k a**k b**(m-1-k) >= 0``.

    Pairs are drawn uniformly from [-10, 10]^2; the identity is tested to a
    relative error of 1e-12.
    """
    if m < 1 or m % 2 == 0:
        raise ValueError(f"m must be an odd positive integer, got {m}")
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-10.0, 10.0, (2, trials))
    k = np.arange(m)[:, None]
    terms = a**k * b ** (m - 1 - k)
    S = terms.sum(axis=0)
    lhs = a**m - b**m
    rhs = S * (a - b)
    scale = np.abs(a) ** m + np.abs(b) ** m + np.abs(terms).sum(axis=0) * np.abs(a - b)
    identity = np.abs(lhs - rhs) <= 1e-12 * scale
    nonneg = S >= -1e-12 * np.abs(terms).sum(axis=0)
    return bool(np.all(identity) and np.all(nonneg))
