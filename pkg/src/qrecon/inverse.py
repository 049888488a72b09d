"""Box-constrained Tikhonov reconstruction of the reaction coefficient.

Minimises

    J(q) = 1/2 ||u_h(q) - y||^2 + alpha/2 (||q||^2 + ||grad q||^2)

over P1 functions ``q`` (no boundary condition) with ``lower <= q <= upper``
nodally, using adjoint gradients and a projected limited-memory BFGS method.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .assembly import _load_from_values, assemble_mass, assemble_stiffness
from .forward import ForwardProblem, solve_forward, solve_linearized
from .mesh import FeFunction

ROUNDOFF_FACTOR = 1e3

__all__ = [
    "InverseProblem",
    "OptimizerOptions",
    "ReconstructionResult",
    "objective",
    "gradient",
    "minimize",
]


@dataclass
class InverseProblem:
    """Data of one reconstruction.

    ``forward`` supplies mesh, sigma, f and m; its ``q`` is ignored.
    ``q_init`` defaults to the constant 1 clipped into the box.
    """

    forward: ForwardProblem
    y_delta: FeFunction
    alpha: float
    q_lower: float = 0.0
    q_upper: float = 2.0
    q_init: FeFunction | None = None
    _ops: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.q_lower <= self.q_upper:
            raise ValueError("box bounds must satisfy 0 <= q_lower <= q_upper")
        mesh = self.forward.mesh
        if self.q_init is None:
            self.q_init = FeFunction(mesh, np.full(mesh.n_vertices, np.clip(1.0, self.q_lower, self.q_upper)))
        v = self.q_init.values
        if np.any(v < self.q_lower) or np.any(v > self.q_upper):
            raise ValueError("q_init violates the box bounds")

    @property
    def mesh(self):
        return self.forward.mesh

    @property
    def mass(self):
        if "M" not in self._ops:
            self._ops["M"] = assemble_mass(self.mesh)
        return self._ops["M"]

    @property
    def dual_weights(self) -> np.ndarray:
        """Inverse lumped mass; ``sqrt(g @ (w * g))`` is a mesh-independent norm of a nodal gradient."""
        if "w" not in self._ops:
            self._ops["w"] = 1.0 / np.asarray(self.mass.sum(axis=1)).ravel()
        return self._ops["w"]

    @property
    def regularizer(self):
        """Gram matrix of the full H1 inner product on S_h."""
        if "R" not in self._ops:
            self._ops["R"] = (self.mass + assemble_stiffness(self.mesh)).tocsr()
        return self._ops["R"]

    def as_function(self, q) -> FeFunction:
        return q if isinstance(q, FeFunction) else FeFunction(self.mesh, q)


def _state(ip: InverseProblem, q: FeFunction, u0=None) -> FeFunction:
    u, _ = solve_forward(ip.forward.with_q(q), u0=u0)
    return u


def objective(ip: InverseProblem, q, u0=None) -> tuple[float, FeFunction]:
    """Tikhonov functional and the state ``u_h(q)``."""
    q = ip.as_function(q)
    u = _state(ip, q, u0)
    r = u.values - ip.y_delta.values
    qv = q.values
    J = 0.5 * r @ (ip.mass @ r) + 0.5 * ip.alpha * qv @ (ip.regularizer @ qv)
    return float(J), u


def gradient(ip: InverseProblem, q, u_of_q: FeFunction) -> np.ndarray:
    """Nodal gradient of :func:`objective` by the adjoint method.

    The adjoint ``p`` solves ``(K + M_w) p = M (u - y)`` with
    ``w = m q u^(m-1)``, and ``g_i = -int phi_i u^m p + alpha ((M + K) q)_i``.
    """
    q = ip.as_function(q)
    fp = ip.forward.with_q(q)
    misfit = ip.mass @ (u_of_q.values - ip.y_delta.values)
    p = solve_linearized(fp, u_of_q, misfit)
    rule = fp.rule
    uq = u_of_q.at(rule)
    pq = p.at(rule)
    g = -_load_from_values(ip.mesh, rule, uq**fp.m * pq)
    return g + ip.alpha * (ip.regularizer @ q.values)


@dataclass
class OptimizerOptions:
    """Projected L-BFGS settings.

    The stopping test compares the projected gradient, measured in the
    lumped-mass dual norm (mesh independent), with
    ``max(gtol, rtol * initial value)``.
    """

    max_iter: int = 15000
    gtol: float = 0.0
    rtol: float = 1e-8
    memory: int = 10
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    initial_step: float = 1.0  # max nodal change of the first (unscaled) step


@dataclass
class ReconstructionResult:
    q_opt: FeFunction
    u_opt: FeFunction
    objective_history: list[float]
    gradient_norm_history: list[float]
    iterations: int
    converged: bool
    message: str = ""

    def to_record(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "message": self.message,
            "objective_history": [float(v) for v in self.objective_history],
            "gradient_norm_history": [float(v) for v in self.gradient_norm_history],
            "q_opt": self.q_opt.values.tolist(),
            "u_opt": self.u_opt.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1)


def _two_loop(g: np.ndarray, pairs, idx: np.ndarray) -> np.ndarray | None:
    """Apply the L-BFGS inverse Hessian (restricted to ``idx``) to ``g[idx]``."""
    gi = g[idx]
    used = []
    for s, y in pairs:
        ss, yy = s[idx], y[idx]
        sy = ss @ yy
        if sy > 1e-12 * np.linalg.norm(ss) * np.linalg.norm(yy) and sy > 0:
            used.append((ss, yy, 1.0 / sy))
    if not used:
        return None
    r = gi.copy()
    alphas = []
    for ss, yy, rho in reversed(used):
        a = rho * (ss @ r)
        alphas.append(a)
        r -= a * yy
    ss, yy, _ = used[-1]
    r *= (ss @ yy) / (yy @ yy)
    for (ss, yy, rho), a in zip(used, reversed(alphas)):
        b = rho * (yy @ r)
        r += (a - b) * ss
    return r


def _stalled_at_noise(trials, slope: float, f: float) -> bool:
    """Decide whether a failed line search reflects round-off in the objective.

    The noise level is read off the smallest trial step, whose predicted
    change is negligible.  A quadratic model fitted to the smallest trial
    that clearly rises above the noise gives the best decrease attainable
    along the direction; if that is below the noise, no representable
    progress is left.
    """
    if not trials:
        return False
    noise = max(abs(trials[-1][1]), ROUNDOFF_FACTOR * np.finfo(float).eps * abs(f))
    if abs(slope) * trials[-1][0] > noise:
        return False
    clear = [(t, df) for t, df in trials if df > 10.0 * noise]
    if not clear:
        return abs(slope) <= noise
    t, df = clear[-1]
    curvature = 2.0 * (df - t * slope) / t**2
    return curvature > 0 and slope**2 / (2.0 * curvature) <= 10.0 * noise


def _direction(g, pairs, inside, inward, initial_step) -> np.ndarray:
    """Search direction: L-BFGS on free nodes, steepest descent on inward-pointing bound nodes.

    Without usable curvature pairs (or if the quasi-Newton direction is
    not a descent direction) the steepest-descent direction is scaled so
    that its largest nodal change equals ``initial_step``.
    """
    d = np.zeros_like(g)
    hd = _two_loop(g, pairs, np.flatnonzero(inside)) if inside.any() else None
    if hd is not None:
        d[inside] = -hd
        d[inward] = -g[inward]
        if g @ d < 0:
            return d
        pairs.clear()
    d = np.where(inside | inward, -g, 0.0)
    return d * (initial_step / max(np.max(np.abs(d)), 1e-300))


def minimize(ip: InverseProblem, opts: OptimizerOptions | None = None,
             callback=None) -> ReconstructionResult:
    """Projected L-BFGS with Armijo backtracking along the projected path.

    Quasi-Newton steps act on nodes strictly inside the box; nodes on a
    bound whose negative gradient points inward take a steepest-descent
    step, the rest stay fixed.  Every iterate is feasible and the objective
    never increases.

    When the line search along a quasi-Newton direction fails, the memory
    is discarded and the iteration is retried with steepest descent.  A
    failed steepest-descent search counts as convergence when a quadratic
    model along the direction predicts a best decrease below the observed
    round-off noise of ``J`` (see :func:`_stalled_at_noise`).

    ``callback(iteration, q_values, objective_value)`` is called after every
    accepted step.
    """
    opts = opts or OptimizerOptions()
    lo, hi = ip.q_lower, ip.q_upper
    x = np.clip(ip.q_init.values, lo, hi)
    f, u = objective(ip, x)
    g = gradient(ip, x, u)
    w = ip.dual_weights
    gtol = None
    pairs: deque = deque(maxlen=opts.memory)
    f_hist, g_hist = [f], []
    converged, message, it = False, "max_iter reached", 0
    warm = ip.forward.m > 1

    while True:
        pg = x - np.clip(x - g, lo, hi)
        g_hist.append(float(np.sqrt(pg @ (w * pg))))
        if gtol is None:
            gtol = max(opts.gtol, opts.rtol * g_hist[0])
        if g_hist[-1] <= gtol:
            converged, message = True, "projected gradient below gtol"
            break
        if it >= opts.max_iter:
            break
        inside = (x > lo) & (x < hi)
        inward = ~inside & (((x <= lo) & (g < 0)) | ((x >= hi) & (g > 0)))
        # first try the quasi-Newton direction; if its line search fails,
        # drop the curvature memory and retry with steepest descent
        found = False
        while not found:
            d = _direction(g, pairs, inside, inward, opts.initial_step)
            t = 1.0
            trials = []
            for _ in range(opts.max_backtracks):
                x_new = np.clip(x + t * d, lo, hi)
                step = x_new - x
                f_new, u_new = objective(ip, x_new, u0=u if warm else None)
                if f_new <= f + opts.armijo * min(g @ step, 0.0) and f_new < f:
                    found = True
                    break
                trials.append((t, f_new - f))
                t *= opts.backtrack
            if found or not pairs:
                break
            pairs.clear()
        if not found:
            if _stalled_at_noise(trials, g @ d, f):
                converged, message = True, "objective stationary at round-off level"
            else:
                message = "line search failed"
            break

        g_new = gradient(ip, x_new, u_new)
        s, y = x_new - x, g_new - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y))
        x, f, g, u = x_new, f_new, g_new, u_new
        f_hist.append(f)
        it += 1
        if callback is not None:
            callback(it, x, f)

    q_opt = FeFunction(ip.mesh, x)
    return ReconstructionResult(
        q_opt=q_opt,
        u_opt=u,
        objective_history=f_hist,
        gradient_norm_history=g_hist,
        iterations=it,
        converged=converged,
        message=message,
    )
