"""Command line front end.

    pwvolterra MODE PROBLEM [options]

Modes: validate, solve, analyze, asympt, refine, verify.  Results go to
``--out`` as <name>.csv, <name>.report.json and <name>.plt.  Exit codes:
0 success, 1 usage error, 2 invalid problem, 3 numerical failure.  Errors
are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ParseError, ProblemError, ValidationError, VolterraError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3
MODES = ("validate", "solve", "analyze", "asympt", "refine", "verify")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


@dataclass
class RunConfig:
    mode: str
    problem_path: Path
    out: Path = Path(".")
    grid: int | None = None
    tol: float = 1e-10
    N: int = 3
    nstar: int | None = None
    assignments: list[dict[str, float]] = field(default_factory=list)
    samples: int = 512
    csv: Path | None = None


def _clean(obj):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _dump(obj) -> str:
    return json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n"


def _parse_assignment(text: str) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        key, sep, val = part.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects name=value, got {part!r}")
        try:
            out[key.strip()] = float(val)
        except ValueError:
            raise UsageError(f"--set {key.strip()}: {val!r} is not a number") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pwvolterra", description="First-kind Volterra equations with piecewise kernels.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("problem", type=Path, help="problem file (JSON)")
    ap.add_argument("csv", type=Path, nargs="?", help="solution CSV (verify mode)")
    ap.add_argument("--grid", type=int, help="number of grid nodes")
    ap.add_argument("--tol", type=float, default=1e-10, help="iteration tolerance (verify: pass threshold)")
    ap.add_argument("--N", type=int, default=3, help="expansion order")
    ap.add_argument("--nstar", default="auto", help="override N* (integer or 'auto')")
    ap.add_argument("--set", action="append", default=[], metavar="NAME=VALUE[,NAME=VALUE]",
                    help="one parameter assignment; repeat for several family members")
    ap.add_argument("--out", type=Path, default=Path("."), help="output directory")
    ap.add_argument("--samples", type=int, default=512, help="sample points for sup estimates")
    return ap


def config_from_args(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    if ns.nstar == "auto":
        nstar = None
    else:
        try:
            nstar = int(ns.nstar)
        except ValueError:
            raise UsageError(f"--nstar expects an integer or 'auto', got {ns.nstar!r}") from None
    if ns.mode == "verify" and ns.csv is None:
        raise UsageError("verify needs a solution CSV after the problem file")
    if ns.mode != "verify" and ns.csv is not None:
        raise UsageError(f"unexpected extra argument {str(ns.csv)!r}")
    if ns.grid is not None and ns.grid < 8:
        raise UsageError("--grid must be at least 8")
    if ns.N < 0:
        raise UsageError("--N must be non-negative")
    if ns.samples < 16:
        raise UsageError("--samples must be at least 16")
    return RunConfig(ns.mode, ns.problem, ns.out, ns.grid, ns.tol, ns.N, nstar,
                     [_parse_assignment(s) for s in ns.set], ns.samples, ns.csv)


def _plot_script(name: str, csv_name: str, m: int, logx: bool = False) -> str:
    lines = [
        f"# gnuplot script for {csv_name}",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set xlabel 't'",
        "set ylabel 'x(t)'",
        "set grid",
    ]
    if logx:
        lines.append("set logscale x")
    lines.append(f"set terminal pngcairo size 900,600")
    lines.append(f"set output '{name}.png'")
    plots = ", ".join(f"'{csv_name}' using 1:{a + 2} with lines" for a in range(m))
    lines.append(f"plot {plots}")
    return "\n".join(lines) + "\n"


def _write(out: Path, name: str, report: dict, csv_text: str | None = None, m: int = 1,
           logx: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.report.json").write_text(_dump(report))
    if csv_text is not None:
        (out / f"{name}.csv").write_text(csv_text)
        (out / f"{name}.plt").write_text(_plot_script(name, f"{name}.csv", m, logx))


# ---------------------------------------------------------------------------
# modes


def _mode_validate(cfg, p) -> int:
    from .model import validate

    rep = validate(p, cfg.samples)
    _write(cfg.out, p.name, {"mode": "validate", "problem": p.name, "ok": rep.ok, **rep.to_dict()})
    if not rep.ok:
        raise ValidationError("problem hypotheses violated: " + ", ".join(rep.failed()), rep)
    return EXIT_OK


def _mode_solve(cfg, p) -> int:
    from .stepper import residual_first_kind, solve

    sol = solve(p, cfg.grid or 2048, cfg.tol, samples=cfg.samples)
    res = residual_first_kind(p, sol)
    report = {"mode": "solve", "problem": p.name, "grid": len(sol.nodes), "residual_first_kind": res, **sol.meta}
    csv = sol.to_csv(comments={"problem": p.name, "mode": "solve", "grid": len(sol.nodes)})
    _write(cfg.out, p.name, report, csv, p.m)
    return EXIT_OK


def _mode_analyze(cfg, p) -> int:
    from .charop import build_charop, scan
    from .conditions import check_condition_A, compute_Nstar
    from .errors import CharOpError
    from .model import validate
    from .refine import default_eps

    rep = validate(p, cfg.samples)
    report: dict = {"mode": "analyze", "problem": p.name, "validation": rep.to_dict()}
    if not rep.ok:
        _write(cfg.out, p.name, report)
        raise ValidationError("problem hypotheses violated: " + ", ".join(rep.failed()), rep)
    report["condition_A"] = check_condition_A(p, cfg.samples).to_dict()
    try:
        eps = default_eps(p, cfg.samples)
        report["N_star"] = compute_Nstar(p, eps, cfg.samples).to_dict()
    except VolterraError as err:
        report["N_star"] = err.to_dict()
    try:
        op = build_charop(p)
        sr = scan(op, cfg.N)
        report["charop"] = op.to_dict()
        report["scan"] = sr.to_dict()
    except CharOpError as err:
        report["charop"] = err.to_dict()
    _write(cfg.out, p.name, report)
    return EXIT_OK


def _mode_asympt(cfg, p) -> int:
    from .asympt import build_expansion

    xhat = build_expansion(p, cfg.N)
    report = {"mode": "asympt", "problem": p.name, "expansion": xhat.to_dict(), "pretty": xhat.pretty(),
              "diagnostics": xhat.diagnostics}
    _write(cfg.out, p.name, report)
    for line in xhat.pretty():
        print(line)
    return EXIT_OK


def _mode_refine(cfg, p) -> int:
    from .asympt import build_expansion
    from .refine import full_solution

    xhat = build_expansion(p, cfg.N)
    assignments = cfg.assignments or [{}]
    for k, a in enumerate(assignments, start=1):
        try:
            xhat.registry.vector(a)
        except ValueError as err:
            raise UsageError(str(err)) from None
        sol = full_solution(p, a, cfg.N, cfg.grid or 4097, N_star=cfg.nstar, tol=cfg.tol,
                            samples=cfg.samples, expansion=xhat)
        name = p.name if len(assignments) == 1 else f"{p.name}_{k}"
        comments = {"problem": p.name, "mode": "refine", **{pk: sol.x.meta[pk] for pk in xhat.registry.ids},
                    "N": sol.x.meta["N"], "N_star": sol.N_star, "t_min": sol.x.meta["t_min"]}
        report = {"mode": "refine", "problem": p.name, "assignment": a, "meta": sol.x.meta,
                  "pretty": xhat.pretty(), "reports": sol.reports}
        _write(cfg.out, name, report, sol.x.to_csv(comments=comments), p.m, logx=True)
    return EXIT_OK


def _mode_verify(cfg, p) -> int:
    from .stepper import GridSolution, residual_profile

    try:
        sol = GridSolution.from_csv(cfg.csv)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read solution {cfg.csv}: {err}") from None
    if sol.m != p.m:
        raise UsageError(f"solution has {sol.m} components, problem has {p.m}")
    t_min = float(sol.meta.get("t_min", 0.0))
    nodes, res = residual_profile(p, sol, 256, t_min)
    worst = float(res.max()) if len(res) else 0.0
    k = int(np.argmax(res)) if len(res) else 0
    passed = worst <= cfg.tol if cfg.tol else True
    name = cfg.csv.stem
    report = {"mode": "verify", "problem": p.name, "csv": str(cfg.csv), "residual_first_kind": worst,
              "worst_t": float(nodes[k]) if len(nodes) else None, "threshold": cfg.tol, "passed": passed}
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / f"{name}.verify.json").write_text(_dump(report))
    print(_dump(report), end="")
    if not passed:
        return _fail(EXIT_NUMERIC, {"error": "verify", "message": f"residual {worst:.3g} exceeds {cfg.tol:.3g}",
                                    "residual_first_kind": worst})
    return EXIT_OK


_MODES = {"validate": _mode_validate, "solve": _mode_solve, "analyze": _mode_analyze,
          "asympt": _mode_asympt, "refine": _mode_refine, "verify": _mode_verify}


def run(cfg: RunConfig) -> int:
    from .model import load_problem

    p = load_problem(cfg.problem_path)
    return _MODES[cfg.mode](cfg, p)


def _fail(code: int, payload: dict) -> int:
    payload = {**payload, "exit_code": code}
    sys.stderr.write(json.dumps(_clean(payload), allow_nan=False) + "\n")
    return code


def main(argv=None) -> int:
    try:
        cfg = config_from_args(sys.argv[1:] if argv is None else argv)
        return run(cfg)
    except UsageError as err:
        return _fail(EXIT_USAGE, {"error": "usage", "message": str(err)})
    except (ProblemError, ParseError, ValidationError) as err:
        return _fail(EXIT_INVALID, err.to_dict())
    except VolterraError as err:
        return _fail(EXIT_NUMERIC, err.to_dict())
    except ValueError as err:
        return _fail(EXIT_USAGE, {"error": "usage", "message": str(err)})


if __name__ == "__main__":
    sys.exit(main())
