"""Step method with successive approximations for the differentiated equation.

Differentiating the first-kind equation and multiplying by K_n(t,t)^{-1}
gives a second-kind equation with retarded arguments,

    x(t) + sum_i C_i(t) x(alpha_i(t)) + sum_i int_{alpha_{i-1}}^{alpha_i} G_i(t,s) x(s) ds = fbar(t).

It is discretised on a node grid: integrals by the composite trapezoid rule
with panels split at every alpha_i(t), retarded values by linear
interpolation.  The discrete system is solved interval by interval with
plain Picard iteration: first on [0, h] where the whole operator
contracts, then on the step intervals where the retarded arguments only
reach into already computed history.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import sparse

from . import _quad
from .conditions import DEFAULT_SAMPLES, StepPlan, check_condition_A, plan_steps
from .errors import ConvergenceError, PreconditionError, StepPlanError, ValidationError
from .model import Problem, inverse_diag, validate

__all__ = [
    "SecondKindForm",
    "GridSolution",
    "build_second_kind",
    "discrete_intervals",
    "assemble",
    "picard",
    "solve_initial",
    "advance",
    "solve",
    "residual_first_kind",
    "residual_profile",
]

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200


class SecondKindForm:
    """Coefficient families of the second-kind equation derived from a problem.

    With ``weight_power = N`` the functional coefficients carry the extra
    factor (alpha_i(t)/t)^N and the kernel the factor (s/t)^N; this is the
    equation satisfied by u in x = xhat + t^N u.  ``rhs`` overrides the
    default right-hand side K_n(t,t)^{-1} f'(t).
    """

    def __init__(self, problem: Problem, weight_power: int = 0,
                 rhs: Callable[[np.ndarray], np.ndarray] | None = None):
        self.problem = problem
        self.m = problem.m
        self.n = problem.n
        self.weight_power = int(weight_power)
        self._rhs = rhs
        self.kernel_is_zero = problem.kernel_dt_is_zero

    def bounds(self, t) -> np.ndarray:
        return self.problem.alphas(t)

    def functional(self, t) -> np.ndarray:
        """C_i(t) for i = 1..n-1, shape (len(t), n-1, m, m)."""
        p = self.problem
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((len(t), max(p.n - 1, 0), p.m, p.m))
        if p.n == 1:
            return out
        Kinv = inverse_diag(p, t)
        for i in range(1, p.n):
            C = p.alpha_prime(i, t)[:, None, None] * (Kinv @ p.jump(i, t))
            if self.weight_power:
                safe = np.where(t > 0, t, 1.0)
                ratio = np.where(t > 0, p.alpha(i, t) / safe, p.alpha_prime(i, 0.0))
                C = C * (ratio**self.weight_power)[:, None, None]
            out[:, i - 1] = C
        return out

    def kernel(self, i: int, t: float, s: np.ndarray) -> np.ndarray:
        """G_i(t, s) = K_n(t,t)^{-1} dK_i/dt (t, s), shape (len(s), m, m)."""
        p = self.problem
        s = np.atleast_1d(np.asarray(s, dtype=float))
        G = inverse_diag(p, t) @ p.piece_dt(i, t, s)
        if self.weight_power:
            w = (s / t) ** self.weight_power if t > 0 else np.zeros_like(s)
            G = G * w[:, None, None]
        return G

    def rhs(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self._rhs is not None:
            return np.asarray(self._rhs(t), dtype=float).reshape(len(t), self.m)
        Kinv = inverse_diag(self.problem, t)
        return np.einsum("kab,kb->ka", Kinv, self.problem.rhs_prime(t))


def build_second_kind(p: Problem) -> SecondKindForm:
    """Second-kind form of ``p``; fails early if K_n(t,t) is singular on a sample grid."""
    inverse_diag(p, np.linspace(0.0, p.T, 64))
    return SecondKindForm(p)


# ---------------------------------------------------------------------------
# grid functions


@dataclass
class GridSolution:
    nodes: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    head: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.nodes), -1)

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __call__(self, t) -> np.ndarray:
        """Piecewise-linear interpolant; below the first node the head function is used if set."""
        t = np.asarray(t, dtype=float)
        flat = t.reshape(-1)
        out = np.empty((len(flat), self.m))
        for a in range(self.m):
            out[:, a] = np.interp(flat, self.nodes, self.values[:, a])
        if self.head is not None:
            low = flat < self.nodes[0]
            if np.any(low):
                out[low] = self.head(flat[low])
        return out.reshape(t.shape + (self.m,))

    def to_csv(self, path=None, comments: dict | None = None) -> str:
        buf = io.StringIO()
        for k, v in (comments or {}).items():
            buf.write(f"# {k}={v}\n")
        buf.write(",".join(["t"] + [f"x{a + 1}" for a in range(self.m)]) + "\n")
        for t, row in zip(self.nodes, self.values):
            buf.write(",".join(format(float(v), ".17g") for v in (t, *row)) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path) -> "GridSolution":
        meta, rows = {}, []
        header = None
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(v) for v in line.split(",")])
        if header is None or not rows or header[0] != "t":
            raise ValueError(f"{path}: not a solution CSV (expected header t,x1,...)")
        data = np.array(rows)
        return cls(data[:, 0], data[:, 1:], meta)


# ---------------------------------------------------------------------------
# discretisation


def _interp_rows(nodes: np.ndarray, x: np.ndarray, ks: np.ndarray):
    """Bracketing (j, theta) of x[r] among nodes[0..ks[r]], row-wise."""
    kk = np.maximum(ks, 1)
    j = np.searchsorted(nodes, x, side="right") - 1
    j = np.clip(j, 0, kk - 1)
    j = np.minimum(j, len(nodes) - 2) if len(nodes) > 1 else np.zeros_like(j)
    if len(nodes) == 1:
        return j, np.zeros(x.shape)
    theta = np.clip((x - nodes[j]) / (nodes[j + 1] - nodes[j]), 0.0, 1.0)
    theta = np.where(ks == 0, 0.0, theta)
    return j, theta


def _add_point(row: np.ndarray, nodes: np.ndarray, x: float, k: int, M: np.ndarray) -> None:
    """row[:, j, :] += weights * M for the linear interpolant at point ``x``."""
    j, th = _interp_rows(nodes, np.array([x]), np.array([k]))
    j, th = int(j[0]), float(th[0])
    if th < 1.0:
        row[:, j, :] += (1.0 - th) * M
    if th > 0.0:
        row[:, j + 1, :] += th * M


def assemble(form: SecondKindForm, nodes: np.ndarray, ks, functional=None, bounds=None,
             parts: tuple[str, ...] = ("functional", "integral")):
    """Discrete operator rows for the nodes with indices ``ks``.

    Returns a matrix A of shape (len(ks)*m, (kmax+1)*m), dense or CSR, such
    that the discrete equation at node ks[r] reads
    x_k + (A @ x.ravel())[r*m:(r+1)*m] = fbar_k.
    """
    ks = np.asarray(ks, dtype=int)
    m, n = form.m, form.n
    R, J = len(ks), int(ks.max()) + 1
    functional = form.functional(nodes[ks]) if functional is None else functional[ks]
    bounds = form.bounds(nodes[ks]) if bounds is None else bounds[ks]

    blk_r, blk_c, blk_v = [], [], []
    if "functional" in parts:
        rr = np.arange(R)
        for i in range(1, n):
            j, th = _interp_rows(nodes, bounds[:, i], ks)
            C = functional[:, i - 1]
            blk_r += [rr, rr]
            blk_c += [j, np.minimum(j + 1, J - 1)]
            blk_v += [(1.0 - th)[:, None, None] * C, th[:, None, None] * C]
    a_idx = np.arange(m)
    if blk_r:
        br = np.concatenate(blk_r)
        bc = np.concatenate(blk_c)
        bv = np.concatenate(blk_v)
        rows = (br[:, None, None] * m + a_idx[None, :, None]) + 0 * a_idx[None, None, :]
        cols = (bc[:, None, None] * m + a_idx[None, None, :]) + 0 * a_idx[None, :, None]
        A = sparse.csr_matrix((bv.ravel(), (rows.ravel(), cols.ravel())), shape=(R * m, J * m))
    else:
        A = sparse.csr_matrix((R * m, J * m))

    if "integral" not in parts or form.kernel_is_zero:
        return A
    dense = np.zeros((R, m, J, m))
    for r, k in enumerate(ks):
        if k == 0:
            continue
        row = dense[r]
        t = nodes[k]
        for i in range(1, n + 1):
            lo, hi = bounds[r, i - 1], bounds[r, i]
            if hi <= lo:
                continue
            a = np.searchsorted(nodes[: k + 1], lo, side="right")
            b = np.searchsorted(nodes[: k + 1], hi, side="left")
            inner = np.arange(a, b)
            pts = np.concatenate(([lo], nodes[inner], [hi]))
            w = _quad.trapezoid_weights(pts)
            G = form.kernel(i, t, pts) * w[:, None, None]
            row[:, inner, :] += np.transpose(G[1:-1], (1, 0, 2))
            _add_point(row, nodes, lo, k, G[0])
            _add_point(row, nodes, hi, k, G[-1])
    return A.toarray() + dense.reshape(R * m, J * m)


def block_norms(A, m: int) -> np.ndarray:
    """Frobenius norms of the m x m blocks of a (dense or sparse) row matrix."""
    R, J = A.shape[0] // m, A.shape[1] // m
    sq = A.multiply(A) if sparse.issparse(A) else A * A
    Pr = sparse.kron(sparse.identity(R), np.ones((1, m)), format="csr")
    Pc = sparse.kron(sparse.identity(J), np.ones((m, 1)), format="csr")
    out = Pr @ sq @ Pc
    out = out.toarray() if sparse.issparse(out) else np.asarray(out)
    return np.sqrt(out)


def picard(A_uu, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int,
           norm_weights: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Plain successive approximations x <- b - A_uu x.

    The stopping test is on the (optionally weighted) sup-norm of successive
    differences relative to max(1, |x|).  Five consecutive non-decreasing
    differences are taken as evidence that the map does not contract.
    """
    R, m = x0.shape
    bf = b.reshape(-1)
    x = x0.reshape(-1).copy()
    w = np.ones(R) if norm_weights is None else np.asarray(norm_weights, dtype=float)

    def norm(v):
        return float(np.max(np.abs(v.reshape(R, m)) * w[:, None])) if R else 0.0

    diffs: list[float] = []
    growth = 0
    for it in range(1, max_iter + 1):
        new = bf - A_uu @ x
        d = norm(new - x)
        x = new
        diffs.append(d)
        scale = max(1.0, norm(x))
        if d <= tol * scale:
            ratios = [b_ / a_ for a_, b_ in zip(diffs[:-1], diffs[1:]) if a_ > 0]
            return x.reshape(R, m), {"iterations": it, "last_diff": d, "ratios": ratios}
        if not math.isfinite(d):
            raise ConvergenceError("successive approximations diverged", iterations=it, residual=d,
                                   non_contractive=True)
        if len(diffs) > 1 and d >= diffs[-2]:
            growth += 1
            if growth >= 5:
                raise ConvergenceError(
                    f"successive approximations do not contract (difference {d:.3g} after {it} iterations)",
                    iterations=it, residual=d, non_contractive=True)
        else:
            growth = 0
    raise ConvergenceError(f"no convergence in {max_iter} iterations (last difference {diffs[-1]:.3g})",
                           iterations=max_iter, residual=diffs[-1],
                           non_contractive=len(diffs) > 1 and diffs[-1] >= diffs[-2])


def discrete_intervals(form: SecondKindForm, nodes: np.ndarray, h: float, eps: float,
                       first_end: int | None = None) -> list[tuple[int, int]]:
    """Realise the interval plan on a node grid as (start, end) index pairs.

    The first interval holds the nodes in [0, h] (at least one panel).  Each
    later interval starts at the previous end, is at most eps*h long, and is
    shortened until every alpha_i(t) of its nodes lies at or before its
    start node.
    """
    M = len(nodes)
    if first_end is None:
        first_end = max(1, int(np.searchsorted(nodes, h * (1 + 1e-12), side="right")) - 1)
    out = [(0, min(first_end, M - 1))]
    if form.n > 1:
        reach = form.bounds(nodes)[:, 1:-1].max(axis=1)
    else:
        reach = np.zeros(M)
    tol = 1e-12 * max(1.0, nodes[-1])
    while out[-1][1] < M - 1:
        s = out[-1][1]
        e = max(s + 1, int(np.searchsorted(nodes, nodes[s] + eps * h * (1 + 1e-12), side="right")) - 1)
        e = min(e, M - 1)
        bad = np.nonzero(reach[s + 1 : e + 1] > nodes[s] + tol)[0]
        if len(bad):
            e = s + int(bad[0])
        if e <= s:
            raise StepPlanError(
                f"retarded argument at t={nodes[s + 1]:.6g} exceeds the solved history; refine the grid")
        out.append((s, e))
    return out


def solve_initial(form: SecondKindForm, nodes: np.ndarray, end: int, tol: float = DEFAULT_TOL,
                  max_iter: int = DEFAULT_MAX_ITER, functional=None, bounds=None,
                  norm_weights=None) -> tuple[np.ndarray, dict]:
    """Values on nodes[0..end] by successive approximations starting from fbar."""
    ks = np.arange(end + 1)
    A = assemble(form, nodes, ks, functional, bounds)
    fbar = form.rhs(nodes[ks])
    return picard(A, fbar, fbar, tol, max_iter, norm_weights)


def advance(form: SecondKindForm, nodes: np.ndarray, history: np.ndarray, start: int, end: int,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, functional=None,
            bounds=None) -> tuple[np.ndarray, dict]:
    """Values on nodes[start+1..end] given ``history`` on nodes[0..start].

    The retarded terms must only reach nodes up to ``start``; this is checked.
    """
    if bounds is None:
        bounds = form.bounds(nodes)
    if form.n > 1:
        reach = bounds[start + 1 : end + 1, 1:-1].max()
        if reach > nodes[start] + 1e-12 * max(1.0, nodes[-1]):
            raise StepPlanError(f"alpha_i(t) = {reach:.6g} lies beyond the interval start {nodes[start]:.6g}")
    ks = np.arange(start + 1, end + 1)
    A = assemble(form, nodes, ks, functional, bounds)
    hist = np.asarray(history[: start + 1], dtype=float)
    R, m = len(ks), form.m
    A_h = A[:, : (start + 1) * m]
    A_u = A[:, (start + 1) * m :]
    fbar = form.rhs(nodes[ks])
    b = fbar - np.asarray(A_h @ hist.reshape(-1)).reshape(R, m)
    return picard(A_u, b, fbar, tol, max_iter)


def solve(p: Problem, grid_density: int = 2048, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
          samples: int = DEFAULT_SAMPLES, plan: StepPlan | None = None) -> GridSolution:
    """Unique continuous solution on a uniform grid of ``grid_density`` nodes."""
    rep = validate(p, max(16, min(samples, 512)))
    if not rep.ok:
        raise ValidationError("problem hypotheses violated: " + ", ".join(rep.failed()), rep)
    condA = check_condition_A(p, samples)
    if not condA.holds:
        raise PreconditionError(f"condition (A) fails: {condA.detail} (D(0)={condA.D0:.6g})")
    if plan is None:
        plan = plan_steps(p, condA)
    form = build_second_kind(p)
    nodes = np.linspace(0.0, p.T, grid_density)
    functional = form.functional(nodes)
    bounds = form.bounds(nodes)
    ivs = discrete_intervals(form, nodes, plan.h, plan.epsilon)
    values = np.zeros((len(nodes), p.m))
    x0, info = solve_initial(form, nodes, ivs[0][1], tol, max_iter, functional, bounds)
    values[: ivs[0][1] + 1] = x0
    iters = [info["iterations"]]
    ratios = [max(info["ratios"], default=0.0)]
    for s, e in ivs[1:]:
        xs, info = advance(form, nodes, values, s, e, tol, max_iter, functional, bounds)
        values[s + 1 : e + 1] = xs
        iters.append(info["iterations"])
        ratios.append(max(info["ratios"], default=0.0))
    meta = {
        "plan": plan.to_dict(),
        "condition_A": condA.to_dict(),
        "intervals": [list(iv) for iv in ivs],
        "iterations": iters,
        "max_observed_ratio": ratios,
        "tol": tol,
    }
    return GridSolution(nodes, values, meta)


# ---------------------------------------------------------------------------
# verification against the original equation


def _integral_first_kind(p: Problem, sol: GridSolution, t: float) -> np.ndarray:
    total = np.zeros(p.m)
    g0 = sol.nodes[0]
    a = p.alphas(t)
    for i in range(1, p.n + 1):
        lo, hi = float(a[i - 1]), float(a[i])
        if hi <= lo:
            continue
        if lo < g0:
            top = min(hi, g0)
            if sol.head is not None:
                if lo == 0.0:
                    s, w = _quad.log_endpoint_rule(top)
                else:
                    s, w = _quad.gauss_rule(lo, top)
                xs = sol.head(s)
            else:
                s, w = _quad.gauss_rule(lo, top)
                xs = np.broadcast_to(sol.values[0], s.shape + (p.m,))
            total += np.einsum("q,qab,qb->a", w, p.piece(i, t, s), xs)
            lo = top
            if hi <= lo:
                continue
        inner = sol.nodes[(sol.nodes > lo) & (sol.nodes < hi)]
        pts = np.concatenate(([lo], inner, [hi]))
        w = _quad.trapezoid_weights(pts)
        total += np.einsum("q,qab,qb->a", w, p.piece(i, t, pts), sol(pts))
    return total


def residual_profile(p: Problem, sol: GridSolution, check: int | np.ndarray | None = 256,
                     t_min: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Sup-norm residual of the first-kind equation at check nodes.

    ``check`` is either an explicit array of points or the maximum number of
    solution nodes to use (evenly subsampled, last node always included).
    """
    if check is None or np.isscalar(check):
        nodes = sol.nodes[sol.nodes >= t_min]
        if check is not None and len(nodes) > check:
            idx = np.unique(np.round(np.linspace(0, len(nodes) - 1, int(check))).astype(int))
            nodes = nodes[idx]
    else:
        nodes = np.asarray(check, dtype=float)
    res = np.empty(len(nodes))
    f = p.rhs(nodes)
    for k, t in enumerate(nodes):
        res[k] = np.max(np.abs(_integral_first_kind(p, sol, float(t)) - f[k]))
    return nodes, res


def residual_first_kind(p: Problem, sol: GridSolution, check: int | np.ndarray | None = 256,
                        t_min: float = 0.0) -> float:
    """max over check nodes of || int_0^t K(t,s) x(s) ds - f(t) ||_inf."""
    _, res = residual_profile(p, sol, check, t_min)
    return float(res.max()) if len(res) else 0.0
