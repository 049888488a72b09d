"""Manufactured test problems, calibrated noisy data and convergence studies.

A study runs one reconstruction per (mesh, seed), measures the state and
coefficient errors against the closed-form solution and aggregates over
seeds by the median.  Reports are written as CSV, SVG (log-log plot) or a
plain text table; every file is written to a temporary name first and
renamed on success.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .assembly import assemble_mass, norm
from .forward import ForwardProblem, solve_forward
from .inverse import InverseProblem, OptimizerOptions, minimize
from .mesh import FeFunction, Mesh, build_mesh, interpolate

__all__ = [
    "ManufacturedCase",
    "Coupling",
    "StudyRecord",
    "make_case",
    "default_coupling",
    "generate_noisy_data",
    "reconstruct",
    "run_study",
    "forward_study",
    "eoc",
    "emit_report",
    "read_csv",
    "CSV_COLUMNS",
]

PI = np.pi


@dataclass(frozen=True)
class ManufacturedCase:
    """Exact pair (u, q) with the matching right-hand side.

    ``u_grad`` returns the derivative array in 1D and a ``(gx, gy)`` pair in
    2D, the convention of :func:`qrecon.assembly.norm`.
    """

    name: str
    dim: int
    u_exact: Callable
    u_grad: Callable
    q_exact: Callable
    f: Callable
    m: int = 1
    sigma: float = 1.0
    q_lower: float = 0.0
    q_upper: float = 2.0

    def forward_problem(self, mesh: Mesh, q=None) -> ForwardProblem:
        return ForwardProblem(mesh, f=self.f, q=self.q_exact if q is None else q, m=self.m, sigma=self.sigma)


def _case_a(m: int) -> ManufacturedCase:
    def u(x):
        return np.sin(PI * x)

    def du(x):
        return PI * np.cos(PI * x)

    def q(x):
        return 1.5 - np.abs(x - 0.5)

    def f(x):
        return PI**2 * np.sin(PI * x) + q(x) * np.sin(PI * x) ** m

    return ManufacturedCase("a" if m == 1 else f"a{m}", 1, u, du, q, f, m=m)


def _case_b(m: int) -> ManufacturedCase:
    def u(x, y):
        return np.sin(PI * x) * np.sin(PI * y)

    def du(x, y):
        return PI * np.cos(PI * x) * np.sin(PI * y), PI * np.sin(PI * x) * np.cos(PI * y)

    def q(x, y):
        return 1.0 + 0.5 * (1.0 - 2.0 * np.maximum(np.abs(x - 0.5), np.abs(y - 0.5)))

    def f(x, y):
        return 2 * PI**2 * u(x, y) + q(x, y) * u(x, y) ** m

    return ManufacturedCase("b" if m == 1 else f"b{m}", 2, u, du, q, f, m=m)


def _case_cubic() -> ManufacturedCase:
    # u = sin(pi x), q = 1, m = 3: f = pi^2 sin + sin^3
    def q(x):
        return np.ones_like(np.asarray(x, dtype=float))

    def f(x):
        return PI**2 * np.sin(PI * x) + np.sin(PI * x) ** 3

    base = _case_a(1)
    return ManufacturedCase("cubic", 1, base.u_exact, base.u_grad, q, f, m=3)


def make_case(name: str) -> ManufacturedCase:
    """Built-in manufactured problems.

    ``"a"``: unit interval, u = sin(pi x), q = 1.5 - |x - 0.5|.
    ``"b"``: unit square, u = sin(pi x) sin(pi y), q a pyramid from 1 to 1.5.
    ``"cubic"``: the interval problem with m = 3 and q = 1.
    Suffixing ``a`` or ``b`` with an odd integer (``"a3"``) keeps u and q and
    changes the exponent.  All cases use sigma = 1 and bounds [0, 2].
    """
    if name == "cubic":
        return _case_cubic()
    if name and name[0] in "ab":
        rest = name[1:]
        m = 1 if rest == "" else int(rest) if rest.isdigit() else None
        if m is not None and m % 2 == 1:
            return _case_a(m) if name[0] == "a" else _case_b(m)
    raise ValueError(f"unknown case {name!r}; expected 'a', 'b', 'cubic' or e.g. 'a3'")


@dataclass(frozen=True)
class Coupling:
    """Parameter choice ``delta = h**2`` and ``alpha = c * delta**2``."""

    c: float

    def __call__(self, h: float) -> tuple[float, float]:
        delta = h * h
        return delta, self.c * delta * delta


def default_coupling(case: ManufacturedCase) -> Coupling:
    return Coupling(5.0 if case.dim == 2 else 1e-2)


def generate_noisy_data(case: ManufacturedCase, mesh: Mesh, delta: float, seed: int) -> FeFunction:
    """Nodal interpolant of the exact state plus uniform noise of L2 norm ``delta``.

    The noise ``s * xi`` uses ``xi`` uniform on [-1, 1] at every node, drawn
    with ``numpy.random.default_rng(seed)``, and the scalar ``s`` that makes
    its mass-matrix norm equal to ``delta``.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    u = interpolate(mesh, case.u_exact).values
    if delta == 0:
        return FeFunction(mesh, u.copy())
    xi = np.random.default_rng(seed).uniform(-1.0, 1.0, mesh.n_vertices)
    size = math.sqrt(float(xi @ (assemble_mass(mesh) @ xi)))
    return FeFunction(mesh, u + (delta / size) * xi)


def eoc(e1: float, e2: float, d1: float, d2: float) -> float:
    """Observed order ``log(e1/e2) / log(d1/d2)``."""
    return math.log(e1 / e2) / math.log(d1 / d2)


def reconstruct(case: ManufacturedCase, n_sub: int, seed: int, coupling: Coupling | None = None,
                options: OptimizerOptions | None = None):
    """One noisy-data reconstruction.

    Returns
    -------
    result : ReconstructionResult
    e_u, e_q : float
        L2 errors of the reconstructed state and coefficient against the
        closed forms.
    h, delta, alpha : float
    """
    coupling = coupling or default_coupling(case)
    mesh = build_mesh(case.dim, n_sub)
    delta, alpha = coupling(mesh.h)
    y = generate_noisy_data(case, mesh, delta, seed)
    ip = InverseProblem(case.forward_problem(mesh, q=0.0), y, alpha,
                        q_lower=case.q_lower, q_upper=case.q_upper)
    res = minimize(ip, options)
    e_u = norm(res.u_opt, "L2", reference=case.u_exact)
    e_q = norm(res.q_opt, "L2", reference=case.q_exact)
    return res, e_u, e_q, mesh.h, delta, alpha


# --- studies ------------------------------------------------------------

@dataclass(frozen=True)
class StudyRecord:
    """One table row: errors are medians over ``n_seeds`` reconstructions."""

    h: float
    delta: float
    alpha: float
    e_u: float
    eoc_u: float | None
    e_q: float
    eoc_q: float | None
    n_seeds: int
    wall_time: float | None = None
    n_sub: int = 0
    optimizer_iterations: int = 0
    error: str = ""


CSV_COLUMNS = ("h", "delta", "alpha", "e_u", "eoc_u", "e_q", "eoc_q", "seed_count", "wall_time",
               "n_sub", "optimizer_iterations", "error")


def _task(args):
    case, n_sub, seed, coupling, options = args
    if isinstance(case, str):
        case = make_case(case)
    t0 = time.perf_counter()
    try:
        res, e_u, e_q, *_ = reconstruct(case, n_sub, seed, coupling, options)
    except Exception as exc:  # a failed row must not stop the study
        return n_sub, seed, math.nan, math.nan, 0, f"seed {seed}: {type(exc).__name__}: {exc}", 0.0
    note = "" if res.converged else f"seed {seed}: {res.message}"
    return n_sub, seed, e_u, e_q, res.iterations, note, time.perf_counter() - t0


def _picklable(case: ManufacturedCase):
    try:
        make_case(case.name)
    except ValueError:
        return None
    return case.name


def run_study(case: ManufacturedCase, n_subs: Sequence[int], coupling: Coupling | None = None,
              seeds: Sequence[int] = (0, 1, 2, 3, 4), jobs: int = 1,
              options: OptimizerOptions | None = None, timing: bool = False) -> list[StudyRecord]:
    """Convergence study over a mesh sequence.

    Parameters
    ----------
    case : ManufacturedCase
    n_subs : sequence of int
        Strictly increasing subdivision counts, one table row each.
    coupling : Coupling, optional
        Defaults to ``c = 1e-2`` in 1D and ``c = 5`` in 2D.
    seeds : sequence of int
        Noise seeds; row errors are medians over them.
    jobs : int
        Worker processes (1 runs inline).  Results do not depend on it.
    timing : bool
        Store the summed wall time per row.  Off by default so that reports
        are reproducible byte for byte.

    Failed or non-converged reconstructions are noted in the row's
    ``error`` field; the study carries on.
    """
    n_subs = [int(n) for n in n_subs]
    if any(b <= a for a, b in zip(n_subs, n_subs[1:])):
        raise ValueError("n_subs must be strictly increasing")
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    coupling = coupling or default_coupling(case)
    key = _picklable(case) if jobs > 1 else None
    payload = key if key is not None else case
    tasks = [(payload, n, s, coupling, options) for n in n_subs for s in seeds]
    if jobs > 1 and key is not None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_task, tasks))
    else:
        out = [_task(t) for t in tasks]
    out.sort(key=lambda r: (r[0], r[1]))

    records: list[StudyRecord] = []
    for n in n_subs:
        rows = [r for r in out if r[0] == n]
        h = build_mesh(case.dim, n).h
        delta, alpha = coupling(h)
        e_u = [r[2] for r in rows if not math.isnan(r[2])]
        e_q = [r[3] for r in rows if not math.isnan(r[3])]
        notes = "; ".join(r[5] for r in rows if r[5])
        rec = StudyRecord(
            h=h, delta=delta, alpha=alpha,
            e_u=float(np.median(e_u)) if e_u else math.nan, eoc_u=None,
            e_q=float(np.median(e_q)) if e_q else math.nan, eoc_q=None,
            n_seeds=len(seeds),
            wall_time=sum(r[6] for r in rows) if timing else None,
            n_sub=n,
            optimizer_iterations=int(np.median([r[4] for r in rows])),
            error=notes,
        )
        if records:
            prev = records[-1]
            rec = replace(rec, eoc_u=_safe_eoc(prev.e_u, rec.e_u, prev.delta, rec.delta),
                          eoc_q=_safe_eoc(prev.e_q, rec.e_q, prev.delta, rec.delta))
        records.append(rec)
    return records


def _safe_eoc(e1, e2, d1, d2):
    if not (e1 > 0 and e2 > 0) or d1 == d2:
        return None
    return eoc(e1, e2, d1, d2)


def forward_study(case: ManufacturedCase, n_subs: Sequence[int]) -> list[dict]:
    """Forward errors with the exact coefficient, plus observed orders in h."""
    rows = []
    for n in n_subs:
        mesh = build_mesh(case.dim, n)
        u, _ = solve_forward(case.forward_problem(mesh))
        rows.append({
            "n_sub": n,
            "h": mesh.h,
            "L2": norm(u, "L2", reference=case.u_exact),
            "H1": norm(u, "H1", reference=case.u_exact, reference_grad=case.u_grad),
        })
    for prev, row in zip(rows, rows[1:]):
        for k in ("L2", "H1"):
            row[f"order_{k}"] = eoc(prev[k], row[k], prev["h"], row["h"])
    return rows


# --- reports ------------------------------------------------------------

def _atomic_write(path, text: str) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _sci(v) -> str:
    if v is None:
        return ""
    return f"{v:.5e}"


def _csv_text(records: Sequence[StudyRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_sci(r.h), _sci(r.delta), _sci(r.alpha), _sci(r.e_u), _sci(r.eoc_u),
                    _sci(r.e_q), _sci(r.eoc_q), r.n_seeds, _sci(r.wall_time),
                    r.n_sub, r.optimizer_iterations, r.error])
    return buf.getvalue()


def read_csv(path) -> list[StudyRecord]:
    """Parse a CSV written by :func:`emit_report` (fields at 6 significant digits)."""
    def opt(s):
        return float(s) if s != "" else None

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [
            StudyRecord(
                h=float(row["h"]), delta=float(row["delta"]), alpha=float(row["alpha"]),
                e_u=float(row["e_u"]), eoc_u=opt(row["eoc_u"]),
                e_q=float(row["e_q"]), eoc_q=opt(row["eoc_q"]),
                n_seeds=int(row["seed_count"]), wall_time=opt(row["wall_time"]),
                n_sub=int(row["n_sub"]), optimizer_iterations=int(row["optimizer_iterations"]),
                error=row["error"],
            )
            for row in reader
        ]


def _text_table(records: Sequence[StudyRecord]) -> str:
    head = ("h", "delta", "alpha", "e_u", "EOC_u", "e_q", "EOC_q")
    lines = []
    for r in records:
        cells = [f"{r.h:.2e}", f"{r.delta:.2e}", f"{r.alpha:.2e}", f"{r.e_u:.2e}",
                 "-" if r.eoc_u is None else f"{r.eoc_u:.3f}", f"{r.e_q:.2e}",
                 "-" if r.eoc_q is None else f"{r.eoc_q:.3f}"]
        lines.append(cells)
    widths = [max(len(h), *(len(c[i]) for c in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [fmt.format(*head), rule] + [fmt.format(*c) for c in lines]
    return "\n".join(out) + "\n"


def _svg_plot(records: Sequence[StudyRecord]) -> str:
    W, H, pad = 480, 360, 60
    d = np.array([r.delta for r in records])
    series = {"e_u": np.array([r.e_u for r in records]), "e_q": np.array([r.e_q for r in records])}
    ys = np.concatenate([v[np.isfinite(v) & (v > 0)] for v in series.values()])
    lx = np.log10(d)
    x0, x1 = lx.min() - 0.1, lx.max() + 0.1
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.5, x1 + 0.5
    y0, y1 = np.log10(ys.min()) - 0.3, np.log10(ys.max()) + 0.3

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (W - 2 * pad)

    def py(v):
        return H - pad - (v - y0) / (y1 - y0) * (H - 2 * pad)

    def pts(xs, vs):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, vs))

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}">',
        f'<rect x="{pad}" y="{pad}" width="{W - 2 * pad}" height="{H - 2 * pad}" fill="none" stroke="black"/>',
    ]
    for k in range(math.ceil(x0), math.floor(x1) + 1):
        parts.append(f'<text x="{px(k):.2f}" y="{H - pad + 18}" font-size="11" text-anchor="middle">1e{k}</text>')
    for k in range(math.ceil(y0), math.floor(y1) + 1):
        parts.append(f'<text x="{pad - 6}" y="{py(k) + 4:.2f}" font-size="11" text-anchor="end">1e{k}</text>')
    parts.append(f'<text x="{W / 2}" y="{H - 15}" font-size="12" text-anchor="middle">delta</text>')

    colors = {"e_u": "#1f77b4", "e_q": "#d62728"}
    for name, v in series.items():
        ok = np.isfinite(v) & (v > 0)
        parts.append(f'<polyline class="data" fill="none" stroke="{colors[name]}" stroke-width="2" '
                     f'points="{pts(lx[ok], np.log10(v[ok]))}"><title>{name}</title></polyline>')
    # reference slopes anchored at the first point of each series, shifted down
    for slope, name in ((1.0, "e_u"), (0.5, "e_q")):
        v = series[name]
        ok = np.flatnonzero(np.isfinite(v) & (v > 0))
        if ok.size == 0:
            continue
        a = math.log10(v[ok[0]]) - 0.2
        ends = np.array([lx[ok[0]], lx[ok[-1]]])
        parts.append(f'<polyline class="reference" fill="none" stroke="gray" stroke-dasharray="6,4" '
                     f'points="{pts(ends, a + slope * (ends - ends[0]))}"><title>slope {slope:g}</title></polyline>')
    for i, name in enumerate(series):
        yy = pad + 16 + 16 * i
        parts.append(f'<line x1="{pad + 10}" y1="{yy}" x2="{pad + 30}" y2="{yy}" stroke="{colors[name]}" stroke-width="2"/>')
        parts.append(f'<text x="{pad + 36}" y="{yy + 4}" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(records: Sequence[StudyRecord], fmt: str, path) -> Path:
    """Write ``records`` as ``"csv"``, ``"svg"`` or ``"text"`` to ``path``."""
    if not records:
        raise ValueError("no records to report")
    render = {"csv": _csv_text, "svg": _svg_plot, "svg-plot": _svg_plot,
              "text": _text_table, "text-table": _text_table}
    if fmt not in render:
        raise ValueError(f"unknown report format {fmt!r}")
    return _atomic_write(path, render[fmt](records))
