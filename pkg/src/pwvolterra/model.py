"""Problem statement: boundary curves, kernel pieces and right-hand side.

The integration triangle 0 < s < t < T is cut by the curves s = alpha_i(t)
into regions D_1..D_n; on region i the kernel is the m x m matrix K_i(t, s).
Region indices are 1-based throughout, matching the usual notation, and the
conventions alpha_0(t) = 0, alpha_n(t) = t are applied by :meth:`Problem.alpha`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expr as ex
from .errors import EvalError, ProblemError, SingularKernelError

__all__ = [
    "BoundaryCurve",
    "KernelPiece",
    "Problem",
    "Check",
    "ValidationReport",
    "problem_from_dict",
    "problem_to_dict",
    "load_problem",
    "validate",
    "locate",
    "kernel_eval",
    "kernel_dt_eval",
    "RANK_TOL",
]

RANK_TOL = 1e-9


def _parse(text, where: str) -> ex.Expr:
    if not isinstance(text, str):
        raise ProblemError(f"{where}: expected an expression string, got {text!r}")
    try:
        e = ex.parse(text)
    except ex.ParseError as err:
        raise ProblemError(f"{where}: {err}") from err
    extra = ex.variables(e) - {"t", "s"}
    if extra:
        raise ProblemError(f"{where}: unknown variable(s) {sorted(extra)}; only t and s are allowed")
    return e


def _eval_on(e: ex.Expr, shape, **b) -> np.ndarray:
    return np.broadcast_to(np.asarray(ex.evaluate(e, b), dtype=float), shape)


@dataclass(frozen=True)
class BoundaryCurve:
    alpha: ex.Expr
    alpha_prime: ex.Expr

    @classmethod
    def from_text(cls, text: str, where: str = "alpha") -> "BoundaryCurve":
        a = _parse(text, where)
        if "s" in ex.variables(a):
            raise ProblemError(f"{where}: boundary curves depend on t only")
        return cls(a, ex.differentiate(a, "t"))


@dataclass(frozen=True)
class KernelPiece:
    entries: tuple[tuple[ex.Expr, ...], ...]
    entries_dt: tuple[tuple[ex.Expr, ...], ...]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[str]], m: int, where: str = "kernel") -> "KernelPiece":
        if len(rows) != m or any(len(r) != m for r in rows):
            raise ProblemError(f"{where}: expected a {m}x{m} array of expressions")
        entries = tuple(
            tuple(_parse(rows[a][b], f"{where}[{a}][{b}]") for b in range(m)) for a in range(m)
        )
        dt = tuple(tuple(ex.differentiate(e, "t") for e in row) for row in entries)
        return cls(entries, dt)

    @property
    def dt_is_zero(self) -> bool:
        return all(ex.is_zero(e) for row in self.entries_dt for e in row)


def _eval_grid(grid, t, s) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    shape = np.broadcast_shapes(t.shape, s.shape)
    m = len(grid)
    out = np.empty(shape + (m, m))
    for a in range(m):
        for b in range(m):
            out[..., a, b] = _eval_on(grid[a][b], shape, t=t, s=s)
    return out


@dataclass(frozen=True)
class Problem:
    """Linear first-kind Volterra problem with a piecewise kernel."""

    m: int
    n: int
    T: float
    boundaries: tuple[BoundaryCurve, ...]
    pieces: tuple[KernelPiece, ...]
    f: tuple[ex.Expr, ...]
    f_prime: tuple[ex.Expr, ...]
    name: str = "problem"
    source: dict = field(default_factory=dict, compare=False, repr=False)

    # -- boundary curves, with alpha_0 = 0 and alpha_n = t

    def alpha(self, i: int, t):
        t = np.asarray(t, dtype=float)
        if i == 0:
            return np.zeros_like(t)
        if i == self.n:
            return t.copy()
        return _eval_on(self.boundaries[i - 1].alpha, t.shape, t=t).copy()

    def alpha_prime(self, i: int, t):
        t = np.asarray(t, dtype=float)
        if i == 0:
            return np.zeros_like(t)
        if i == self.n:
            return np.ones_like(t)
        return _eval_on(self.boundaries[i - 1].alpha_prime, t.shape, t=t).copy()

    def alphas(self, t) -> np.ndarray:
        """All curves alpha_0..alpha_n at ``t``; shape ``t.shape + (n+1,)``."""
        return np.stack([self.alpha(i, t) for i in range(self.n + 1)], axis=-1)

    # -- kernel pieces (1-based piece index)

    def piece(self, i: int, t, s) -> np.ndarray:
        return _eval_grid(self.pieces[i - 1].entries, t, s)

    def piece_dt(self, i: int, t, s) -> np.ndarray:
        return _eval_grid(self.pieces[i - 1].entries_dt, t, s)

    def diag_kernel(self, t) -> np.ndarray:
        """K_n(t, t)."""
        return self.piece(self.n, t, t)

    def jump(self, i: int, t) -> np.ndarray:
        """K_i(t, alpha_i(t)) - K_{i+1}(t, alpha_i(t)) for i = 1..n-1."""
        a = self.alpha(i, t)
        return self.piece(i, t, a) - self.piece(i + 1, t, a)

    def rhs(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([_eval_on(e, t.shape, t=t) for e in self.f], axis=-1)

    def rhs_prime(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([_eval_on(e, t.shape, t=t) for e in self.f_prime], axis=-1)

    @property
    def kernel_dt_is_zero(self) -> bool:
        return all(p.dt_is_zero for p in self.pieces)


def problem_from_dict(d: dict, name: str | None = None) -> Problem:
    try:
        m, n, T = int(d["m"]), int(d["n"]), float(d["T"])
        alphas, kernels, f = d["alphas"], d["kernels"], d["f"]
    except KeyError as err:
        raise ProblemError(f"missing field {err.args[0]!r}") from None
    except (TypeError, ValueError) as err:
        raise ProblemError(f"bad scalar field: {err}") from None
    if m < 1 or n < 1:
        raise ProblemError("m and n must be positive")
    if not T > 0:
        raise ProblemError("T must be positive")
    if len(alphas) != n - 1:
        raise ProblemError(f"expected {n - 1} boundary curves, got {len(alphas)}")
    if len(kernels) != n:
        raise ProblemError(f"expected {n} kernel pieces, got {len(kernels)}")
    if len(f) != m:
        raise ProblemError(f"expected {m} right-hand side components, got {len(f)}")
    bounds = tuple(BoundaryCurve.from_text(a, f"alphas[{i}]") for i, a in enumerate(alphas))
    pieces = tuple(KernelPiece.from_rows(k, m, f"kernels[{i}]") for i, k in enumerate(kernels))
    fs = tuple(_parse(x, f"f[{i}]") for i, x in enumerate(f))
    for i, e in enumerate(fs):
        if "s" in ex.variables(e):
            raise ProblemError(f"f[{i}]: right-hand side depends on t only")
    fp = tuple(ex.differentiate(e, "t") for e in fs)
    return Problem(m, n, T, bounds, pieces, fs, fp, name=name or d.get("name", "problem"), source=dict(d))


def problem_to_dict(p: Problem) -> dict:
    return {
        "name": p.name,
        "m": p.m,
        "n": p.n,
        "T": p.T,
        "alphas": [str(b.alpha) for b in p.boundaries],
        "kernels": [[[str(e) for e in row] for row in piece.entries] for piece in p.pieces],
        "f": [str(e) for e in p.f],
    }


def _schema() -> dict:
    from importlib import resources

    return json.loads(resources.files("pwvolterra").joinpath("problem-schema.json").read_text())


def load_problem(path) -> Problem:
    """Read a JSON problem file, check it against the schema and build the problem."""
    import jsonschema

    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ProblemError(f"cannot read problem file {path}: {err}") from None
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as err:
        loc = "/".join(str(x) for x in err.absolute_path) or "<root>"
        raise ProblemError(f"schema violation at {loc}: {err.message}") from None
    return problem_from_dict(data, name=data.get("name", path.stem))


# ---------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    passed: bool
    worst_t: float | None = None
    worst_value: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "worst_t": self.worst_t,
            "worst_value": self.worst_value,
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    checks: list[Check]
    samples: int

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "samples": self.samples, "checks": [c.to_dict() for c in self.checks]}


def _guarded(name: str, fn) -> Check:
    try:
        return fn()
    except EvalError as err:
        return Check(name, False, detail=f"evaluation failed: {err}")


def validate(p: Problem, samples: int = 512) -> ValidationReport:
    """Check the structural hypotheses on a sampled grid of [0, T]."""
    if samples < 16:
        raise ValueError("samples must be at least 16")
    grid = np.linspace(0.0, p.T, samples)
    inner = grid[1:-1]
    checks = []

    def alpha_zero():
        if p.n == 1:
            return Check("alpha(0)=0", True, 0.0, 0.0)
        v = np.abs(p.alphas(0.0)[1:-1])
        i = int(np.argmax(v))
        return Check("alpha(0)=0", bool(v.max() <= 1e-12), 0.0, float(v[i]), f"curve {i + 1}")

    def ordering():
        a = p.alphas(inner)  # (samples-2, n+1)
        gaps = np.diff(a, axis=1)
        k = np.unravel_index(np.argmin(gaps), gaps.shape)
        worst = float(gaps[k])
        return Check("alpha ordering", worst > 0, float(inner[k[0]]), worst,
                     f"smallest gap between curve {k[1]} and {k[1] + 1}")

    def slope_ordering():
        b = np.array([p.alpha_prime(i, 0.0) for i in range(p.n + 1)], dtype=float)
        b[0], b[-1] = 0.0, 1.0
        gaps = np.diff(b)
        k = int(np.argmin(gaps))
        return Check("alpha'(0) ordering", bool(gaps[k] > 0), 0.0, float(gaps[k]),
                     "requires 0 < alpha_1'(0) < ... < alpha_{n-1}'(0) < 1")

    def f_zero():
        v = np.abs(p.rhs(0.0))
        return Check("f(0)=0", bool(v.max() <= 1e-12), 0.0, float(v.max()))

    def invertible():
        sv = np.linalg.svd(p.diag_kernel(grid), compute_uv=False)
        ratio = sv[:, -1] / np.maximum(sv[:, 0], np.finfo(float).tiny)
        ratio = np.where(sv[:, 0] > 0, ratio, 0.0)
        k = int(np.argmin(ratio))
        return Check("K_n(t,t) invertible", bool(ratio[k] > RANK_TOL), float(grid[k]), float(ratio[k]),
                     "min singular value / max singular value")

    def evaluable():
        th = np.linspace(0.0, 1.0, 9)
        tt = grid[:, None]
        bad = None
        for i in range(1, p.n + 1):
            lo, hi = p.alpha(i - 1, grid), p.alpha(i, grid)
            ss = lo[:, None] + th[None, :] * (hi - lo)[:, None]
            try:
                vals = p.piece(i, tt, ss)
                vals_dt = p.piece_dt(i, tt, ss)
            except EvalError as err:
                return Check("kernels evaluable", False, detail=f"piece {i}: {err}")
            if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(vals_dt))):
                bad = i
        return Check("kernels evaluable", bad is None, detail="" if bad is None else f"non-finite values on piece {bad}")

    for name, fn in [
        ("alpha(0)=0", alpha_zero),
        ("alpha ordering", ordering),
        ("alpha'(0) ordering", slope_ordering),
        ("f(0)=0", f_zero),
        ("K_n(t,t) invertible", invertible),
        ("kernels evaluable", evaluable),
    ]:
        checks.append(_guarded(name, fn))
    return ValidationReport(checks, samples)


# ---------------------------------------------------------------------------
# point evaluation


def locate(p: Problem, t: float, s: float) -> int:
    """Index i of the region containing (t, s); s = alpha_i(t) belongs to region i."""
    if s > t or s < 0:
        raise ValueError(f"point (t={t}, s={s}) is outside 0 <= s <= t")
    a = p.alphas(float(t))
    for i in range(1, p.n + 1):
        if s <= a[i]:
            return i
    return p.n


def kernel_eval(p: Problem, t: float, s: float) -> np.ndarray:
    return p.piece(locate(p, t, s), t, s)


def kernel_dt_eval(p: Problem, t: float, s: float) -> np.ndarray:
    return p.piece_dt(locate(p, t, s), t, s)


def inverse_diag(p: Problem, t) -> np.ndarray:
    """K_n(t,t)^{-1}, stacked over ``t``."""
    K = p.diag_kernel(t)
    try:
        sv = np.linalg.svd(K, compute_uv=False)
        if np.any(sv[..., -1] <= RANK_TOL * np.maximum(sv[..., 0], np.finfo(float).tiny)):
            raise np.linalg.LinAlgError
        return np.linalg.inv(K)
    except np.linalg.LinAlgError:
        raise SingularKernelError("K_n(t,t) is singular on the requested points") from None
