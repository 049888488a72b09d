"""Command-line interface: ``qrecon <command> [options]``.

Commands: ``forward``, ``invert``, ``study``, ``stability``, ``identity-check``.
Options may also come from a TOML file given with ``--config``; flags take
precedence over file values.  Exit status is 0 on success, 1 when a solver
did not converge and 2 for configuration errors.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .assembly import norm
from .experiments import (
    Coupling,
    _atomic_write,
    default_coupling,
    emit_report,
    generate_noisy_data,
    make_case,
    run_study,
)
from .forward import ConvergenceError, solve_forward
from .inverse import InverseProblem, OptimizerOptions, minimize
from .mesh import FeFunction, build_mesh
from .stability import check_lower_bound, scan_stability, theory_gamma, verify_identity_mB, write_samples_csv

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("forward", "invert", "study", "stability", "identity-check")
FORMATS = ("csv", "svg", "text")
SUFFIX = {"csv": ".csv", "svg": ".svg", "text": ".txt"}

# option name -> (default, commands it applies to)
OPTIONS = {
    "case": ("a", {"forward", "invert", "study", "stability"}),
    "m": (None, {"forward", "invert", "study", "stability", "identity-check"}),
    "n_sub": (None, {"forward", "invert", "stability"}),
    "n_subs": (None, {"study"}),
    "q": ("exact", {"forward"}),
    "delta": (None, {"invert"}),
    "alpha": (None, {"invert"}),
    "coupling_c": (None, {"study"}),
    "seed": (None, {"invert", "stability", "identity-check"}),
    "seeds": ("5", {"study"}),
    "q_lower": (0.0, {"invert", "study"}),
    "q_upper": (2.0, {"invert", "study"}),
    "q_init": (1.0, {"invert"}),
    "gtol": (None, {"invert", "study"}),
    "max_iter": (None, {"invert", "study"}),
    "jobs": (None, {"study"}),
    "out_dir": (".", {"forward", "invert", "study", "stability"}),
    "format": ("csv,svg,text", {"study"}),
    "timing": (False, {"study"}),
    "n_samples": (50, {"stability"}),
    "fine_n_sub": (None, {"stability"}),
    "gamma": (None, {"stability"}),
    "trials": (10_000, {"identity-check"}),
}
DEFAULT_N_SUB = {1: 256, 2: 50}
DEFAULT_N_SUBS = {1: "64,128,256,512", 2: "10,22,34,50"}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        if name == "values":
            raise AttributeError(name)
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrecon", description="Reaction-coefficient reconstruction with P1 FEM.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="TOML file with option values")
    p.add_argument("--case", help="manufactured case: a, b, cubic, or a3/b5/... for other exponents")
    p.add_argument("--m", type=int, help="odd exponent of the nonlinearity")
    p.add_argument("--n-sub", type=int, dest="n_sub")
    p.add_argument("--n-subs", dest="n_subs", help="comma-separated increasing list")
    p.add_argument("--q", help="forward coefficient: 'exact' or a constant")
    p.add_argument("--delta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--coupling-c", type=float, dest="coupling_c", help="alpha = c * delta**2")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="number of seeds, or a comma-separated list")
    p.add_argument("--q-lower", type=float, dest="q_lower")
    p.add_argument("--q-upper", type=float, dest="q_upper")
    p.add_argument("--q-init", type=float, dest="q_init")
    p.add_argument("--gtol", type=float)
    p.add_argument("--max-iter", type=int, dest="max_iter")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--format", help="comma-separated subset of csv,svg,text")
    p.add_argument("--timing", action="store_const", const=True, default=None,
                   help="record wall time in the CSV (breaks byte-identical output)")
    p.add_argument("--n-samples", type=int, dest="n_samples")
    p.add_argument("--fine-n-sub", type=int, dest="fine_n_sub")
    p.add_argument("--gamma", type=float)
    p.add_argument("--trials", type=int)
    return p


def _read_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML in {path}: {exc}") from None
    out = {}
    for key, value in data.items():
        name = key.replace("-", "_")
        if name not in OPTIONS:
            raise ConfigError(f"config: unknown key {key!r}")
        out[name] = value
    return out


def _int_list(text, name) -> list[int]:
    if isinstance(text, (list, tuple)):
        items = text
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        return [int(s) for s in items]
    except ValueError:
        raise ConfigError(f"{name}: expected integers, got {text!r}") from None


def parse_config(argv) -> RunConfig:
    """Merge defaults, an optional TOML file and command-line flags."""
    args = _parser().parse_args(argv)
    given = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")}
    from_file = _read_config_file(args.config) if args.config else {}
    cmd = args.command
    for name in given:
        if cmd not in OPTIONS[name][1]:
            raise ConfigError(f"{name.replace('_', '-')}: option does not apply to '{cmd}'")
    merged = {k: d for k, (d, cmds) in OPTIONS.items() if cmd in cmds}
    merged.update({k: v for k, v in from_file.items() if k in merged})
    merged.update(given)

    v = merged
    if v.get("m") is not None and (v["m"] < 1 or v["m"] % 2 == 0):
        raise ConfigError(f"m: must be an odd positive integer, got {v['m']}")
    if "case" in v:
        name = str(v["case"])
        if v.get("m") not in (None, 1):
            if name not in ("a", "b"):
                raise ConfigError(f"m: cannot combine --m with case {name!r}")
            name = f"{name}{v['m']}"
        try:
            case = make_case(name)
        except ValueError as exc:
            raise ConfigError(f"case: {exc}") from None
        v["case_obj"] = case
    if cmd == "identity-check" and v.get("m") is None:
        v["m"] = 1
    if "alpha" in v and v["alpha"] is not None and not v["alpha"] > 0:
        raise ConfigError(f"alpha: must be positive, got {v['alpha']}")
    if "delta" in v and v["delta"] is not None and not v["delta"] >= 0:
        raise ConfigError(f"delta: must be nonnegative, got {v['delta']}")
    if "coupling_c" in v and v["coupling_c"] is not None and not v["coupling_c"] > 0:
        raise ConfigError(f"coupling-c: must be positive, got {v['coupling_c']}")
    if "q_lower" in v and not 0.0 <= float(v["q_lower"]) <= float(v["q_upper"]):
        raise ConfigError("q-lower/q-upper: need 0 <= q-lower <= q-upper")
    if "q_init" in v and not float(v["q_lower"]) <= float(v["q_init"]) <= float(v["q_upper"]):
        raise ConfigError("q-init: must lie within [q-lower, q-upper]")
    if "seed" in v and v["seed"] is None:
        env = os.environ.get("QRECON_SEED")
        try:
            v["seed"] = int(env) if env else 0
        except ValueError:
            raise ConfigError(f"QRECON_SEED: expected an integer, got {env!r}") from None
    if "seeds" in v:
        raw = v["seeds"]
        seeds = _int_list(raw, "seeds")
        if isinstance(raw, int) or (isinstance(raw, str) and "," not in raw):
            if not seeds or seeds[0] < 1:
                raise ConfigError(f"seeds: need at least one seed, got {raw!r}")
            base = int(os.environ.get("QRECON_SEED", "0") or 0)
            seeds = list(range(base, base + seeds[0]))
        v["seed_list"] = seeds
    if "n_subs" in v:
        dim = v["case_obj"].dim
        ns = _int_list(v["n_subs"] if v["n_subs"] is not None else DEFAULT_N_SUBS[dim], "n-subs")
        if not ns or any(n < 2 for n in ns) or any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError(f"n-subs: need a strictly increasing list of integers >= 2, got {v['n_subs']!r}")
        v["n_subs"] = ns
    if "n_sub" in v:
        if v["n_sub"] is None:
            v["n_sub"] = DEFAULT_N_SUB[v["case_obj"].dim] if cmd != "stability" else 64
        if v["n_sub"] < 2:
            raise ConfigError(f"n-sub: must be at least 2, got {v['n_sub']}")
    if "format" in v:
        fmts = [s.strip() for s in str(v["format"]).split(",") if s.strip()]
        bad = [f for f in fmts if f not in FORMATS]
        if bad or not fmts:
            raise ConfigError(f"format: unknown format(s) {bad or fmts}; choose from {', '.join(FORMATS)}")
        v["formats"] = fmts
    if "jobs" in v:
        v["jobs"] = v["jobs"] if v["jobs"] is not None else (os.cpu_count() or 1)
        if v["jobs"] < 1:
            raise ConfigError("jobs: must be at least 1")
    if cmd == "stability" and v["fine_n_sub"] is None:
        v["fine_n_sub"] = 512 if v["case_obj"].dim == 1 else 128
    if cmd == "stability" and v["n_samples"] < 10:
        raise ConfigError("n-samples: must be at least 10")
    if cmd == "identity-check" and v["trials"] < 1:
        raise ConfigError("trials: must be positive")
    if "q" in v and v["q"] != "exact":
        try:
            v["q"] = float(v["q"])
        except ValueError:
            raise ConfigError(f"q: expected 'exact' or a number, got {v['q']!r}") from None
        if v["q"] < 0:
            raise ConfigError("q: must be nonnegative")
    if "out_dir" in v:
        out = Path(v["out_dir"])
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError:
            raise ConfigError(f"out-dir: cannot create {out}") from None
        if not os.access(out, os.W_OK):
            raise ConfigError(f"out-dir: {out} is not writable")
        v["out_dir"] = out
    return RunConfig(cmd, v)


def _options(cfg: RunConfig) -> OptimizerOptions:
    opts = OptimizerOptions()
    if cfg.gtol is not None:
        opts.gtol = cfg.gtol
    if cfg.max_iter is not None:
        opts.max_iter = cfg.max_iter
    return opts


def _run_forward(cfg: RunConfig) -> int:
    case = cfg.case_obj
    mesh = build_mesh(case.dim, cfg.n_sub)
    q = case.q_exact if cfg.q == "exact" else cfg.q
    u, report = solve_forward(case.forward_problem(mesh, q=q))
    e0 = norm(u, "L2", reference=case.u_exact)
    e1 = norm(u, "H1", reference=case.u_exact, reference_grad=case.u_grad)
    print(f"forward case={case.name} n_sub={cfg.n_sub} h={mesh.h:.4e} newton_iterations={report.iterations} "
          f"L2_error={e0:.6e} H1_error={e1:.6e}")
    record = {"case": case.name, "n_sub": cfg.n_sub, "h": mesh.h, "q": str(cfg.q),
              "newton_iterations": report.iterations, "L2_error": e0, "H1_error": e1,
              "u": u.values.tolist()}
    _atomic_write(cfg.out_dir / f"forward_{case.name}_n{cfg.n_sub}.json", json.dumps(record, indent=1))
    return EXIT_OK


def _run_invert(cfg: RunConfig) -> int:
    case = cfg.case_obj
    mesh = build_mesh(case.dim, cfg.n_sub)
    d0, a0 = default_coupling(case)(mesh.h)
    delta = d0 if cfg.delta is None else cfg.delta
    alpha = a0 if cfg.alpha is None else cfg.alpha
    y = generate_noisy_data(case, mesh, delta, cfg.seed)
    ip = InverseProblem(case.forward_problem(mesh, q=0.0), y, alpha,
                        q_lower=float(cfg.q_lower), q_upper=float(cfg.q_upper),
                        q_init=FeFunction(mesh, [float(cfg.q_init)] * mesh.n_vertices))
    res = minimize(ip, _options(cfg))
    e_u = norm(res.u_opt, "L2", reference=case.u_exact)
    e_q = norm(res.q_opt, "L2", reference=case.q_exact)
    print(f"invert case={case.name} n_sub={cfg.n_sub} seed={cfg.seed} delta={delta:.4e} alpha={alpha:.4e} "
          f"iterations={res.iterations} converged={res.converged} e_u={e_u:.6e} e_q={e_q:.6e}")
    record = res.to_record()
    record.update({"case": case.name, "n_sub": cfg.n_sub, "seed": cfg.seed, "h": mesh.h,
                   "delta": delta, "alpha": alpha, "e_u": e_u, "e_q": e_q})
    _atomic_write(cfg.out_dir / f"invert_{case.name}_n{cfg.n_sub}_s{cfg.seed}.json", json.dumps(record, indent=1))
    if not res.converged:
        print(f"error: optimizer did not converge ({res.message})", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _fmt(v):
    return "-" if v is None else f"{v:.3f}"


def _run_study(cfg: RunConfig) -> int:
    case = cfg.case_obj
    coupling = Coupling(cfg.coupling_c) if cfg.coupling_c is not None else default_coupling(case)
    if (float(cfg.q_lower), float(cfg.q_upper)) != (case.q_lower, case.q_upper):
        case = replace(case, q_lower=float(cfg.q_lower), q_upper=float(cfg.q_upper))
    records = run_study(case, cfg.n_subs, coupling, cfg.seed_list, jobs=cfg.jobs,
                        options=_options(cfg), timing=bool(cfg.timing))
    failed = False
    for r in records:
        print(f"n_sub={r.n_sub} h={r.h:.3e} delta={r.delta:.3e} alpha={r.alpha:.3e} "
              f"e_u={r.e_u:.4e} eoc_u={_fmt(r.eoc_u)} e_q={r.e_q:.4e} eoc_q={_fmt(r.eoc_q)}"
              + (f" [{r.error}]" if r.error else ""))
        failed |= bool(r.error) or math.isnan(r.e_u)
    for fmt in cfg.formats:
        path = emit_report(records, fmt, cfg.out_dir / f"study_{case.name}{SUFFIX[fmt]}")
        print(f"wrote {path}")
    return EXIT_SOLVER if failed else EXIT_OK


def _run_stability(cfg: RunConfig) -> int:
    case = cfg.case_obj
    gamma = theory_gamma(case.m) if cfg.gamma is None else cfg.gamma
    passed, worst = check_lower_bound(case, case.q_exact, gamma, cfg.n_sub)
    print(f"lower_bound gamma={gamma:g} n_sub={cfg.n_sub} min_ratio={worst:.6e} passed={passed}")
    fit = scan_stability(case, cfg.n_samples, cfg.seed, cfg.fine_n_sub, gamma=gamma)
    print(f"stability kappa={fit.kappa_theory:g} exponent={fit.exponent_theory:.4f} "
          f"max_ratio={fit.max_ratio:.6e} n_samples={fit.n_samples}")
    path = write_samples_csv(fit.samples, cfg.out_dir / f"stability_{case.name}.csv")
    print(f"wrote {path}")
    return EXIT_OK


def _run_identity(cfg: RunConfig) -> int:
    ok = verify_identity_mB(cfg.m, cfg.trials, cfg.seed)
    print(f"identity m={cfg.m} trials={cfg.trials} passed={ok}")
    return EXIT_OK if ok else EXIT_SOLVER


def run(cfg: RunConfig) -> int:
    handler = {
        "forward": _run_forward,
        "invert": _run_invert,
        "study": _run_study,
        "stability": _run_stability,
        "identity-check": _run_identity,
    }[cfg.command]
    try:
        return handler(cfg)
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        _parser().print_usage(sys.stderr)
        print("qrecon: error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_OK
    except ConfigError as exc:
        print(f"qrecon: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)
