"""Correction of a log-power expansion to an exact solution.

Writing x = xhat + t^N u, with xhat a truncated expansion whose residual
is o(t^N), turns the differentiated equation into

    u(t) + sum_i C_i(t) (alpha_i(t)/t)^N u(alpha_i(t))
         + sum_i int G_i(t,s) (s/t)^N u(s) ds = gamma(t),
    gamma(t) = -K_n(t,t)^{-1} F(xhat)(t) / t^N,

which has a bounded right-hand side and is solved by successive
approximations in the norm max e^{-lt} |u(t)|.  For large enough N the
functional part is a contraction and a large l makes the integral part
small.  Past T' the same equation is continued interval by interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import sparse

from .asympt import (FLOOR_FACTOR, LogPowerExpansion, apply_F, build_expansion, eval_expansion,
                     residual_series)
from .conditions import DEFAULT_SAMPLES, NStarReport, compute_Nstar
from .errors import ConvergenceError, RefineError, StepPlanError, TaylorError
from .model import Problem, inverse_diag
from .stepper import (DEFAULT_MAX_ITER, DEFAULT_TOL, GridSolution, SecondKindForm, advance, assemble,
                      block_norms, discrete_intervals, picard)

__all__ = [
    "WeightedNorm",
    "ParametricSolution",
    "residual_gamma",
    "gamma_profile",
    "default_eps",
    "refine_grid",
    "iterate_u",
    "full_solution",
    "T_MIN",
]

T_MIN = 1e-8
L_CAP_FACTOR = 2.0**16


@dataclass(frozen=True)
class WeightedNorm:
    l: float

    def weights(self, t) -> np.ndarray:
        return np.exp(-self.l * np.asarray(t, dtype=float))

    def __call__(self, t, values) -> float:
        v = np.asarray(values, dtype=float).reshape(len(np.atleast_1d(t)), -1)
        return float(np.max(self.weights(t) * np.linalg.norm(v, axis=1))) if v.size else 0.0

    def operator_bound(self, t, bn) -> float:
        """max_k sum_j |A_kj| e^{-l (t_k - t_j)} for lower-triangular block norms ``bn``."""
        coo = sparse.coo_matrix(bn)
        if coo.nnz == 0:
            return 0.0
        t = np.asarray(t, dtype=float)
        # a retarded argument may use the node right after t_k with a small weight; clamp at 0
        w = coo.data * np.exp(-self.l * np.maximum(t[coo.row] - t[coo.col], 0.0))
        return float(np.bincount(coo.row, weights=w, minlength=bn.shape[0]).max())


def _tail_bound(tail: LogPowerExpansion, cvec: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Size of the two highest terms of ``tail``: a stand-in for its truncation error."""
    z = np.log(t)
    top = len(tail.coeffs) - 1
    out = np.zeros(len(t))
    for J in (top - 1, top):
        out += np.linalg.norm(tail.coeffs[J].evaluate(z, cvec), axis=-1) * t**J
    return out


def residual_gamma(p: Problem, xhat: LogPowerExpansion, assignment, N_star: int, t,
                   tail: LogPowerExpansion | None = None) -> np.ndarray:
    """-K_n(t,t)^{-1} F(xhat)(t) / t^N* for t > 0.

    F is taken with the exact data, except where the Taylor series ``tail``
    of F(xhat) has a smaller error estimate than the roundoff level of the
    exact evaluation.  Without this, roundoff divided by t^N* would swamp
    gamma near 0.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise ValueError("gamma is evaluated at t > 0 only")
    F, S = apply_F(p, lambda s: eval_expansion(xhat, s, assignment), t)
    if tail is not None:
        cvec = xhat.registry.vector(assignment)
        use = _tail_bound(tail, cvec, t) < FLOOR_FACTOR * S
        if np.any(use):
            F[use] = eval_expansion(tail, t[use], assignment)
    g = -np.einsum("kab,kb->ka", inverse_diag(p, t), F)
    return g / t[:, None] ** N_star


def gamma_profile(p: Problem, xhat: LogPowerExpansion, assignment, N_star: int, t_min: float = T_MIN,
                  t_max: float = 1e-2, points: int = 40) -> dict:
    """Decide whether gamma stays bounded as t -> t_min.

    Only values above the roundoff floor of F (divided by t^N*) count; a
    fitted slope below -1/2 on them means gamma grows like a negative power.
    """
    t = np.geomspace(t_min, max(t_max, 10 * t_min), points)
    F, S = apply_F(p, lambda s: eval_expansion(xhat, s, assignment), t)
    Kinv = inverse_diag(p, t)
    g = np.linalg.norm(np.einsum("kab,kb->ka", Kinv, F), axis=1) / t**N_star
    floor = FLOOR_FACTOR * S * np.linalg.norm(Kinv, ord=2, axis=(1, 2)) / t**N_star
    mask = g > floor
    slope = math.nan
    if mask.sum() >= 3:
        slope = float(np.polyfit(np.log(t[mask]), np.log(g[mask]), 1)[0])
    blowup = bool(mask.sum() >= 3 and slope < -0.5)
    return {"t": t.tolist(), "gamma": g.tolist(), "floor": floor.tolist(), "slope": slope,
            "significant": int(mask.sum()), "blowup": blowup}


def _eps_candidates(p: Problem, samples: int) -> list[float]:
    if p.n == 1:
        return [0.5]
    t = np.linspace(0.0, p.T, samples)
    worst = 0.0
    for i in range(1, p.n):
        ratio = np.empty(samples)
        ratio[0] = float(p.alpha_prime(i, 0.0))
        ratio[1:] = p.alpha(i, t[1:]) / t[1:]
        worst = max(worst, float(np.max(np.abs(p.alpha_prime(i, t)))), float(ratio.max()))
    beta = max(float(p.alpha_prime(i, 0.0)) for i in range(1, p.n))
    out = [worst] if 0 < worst < 1 else []
    out += [beta + (1.0 - beta) * k / 4 for k in (1, 2, 3)]
    return [e for e in out if 0 < e < 1]


def default_eps(p: Problem, samples: int = DEFAULT_SAMPLES) -> float:
    """Slope bound used for N*.

    Candidates are the sampled max of alpha_i' and alpha_i/t over [0, T]
    (which gives T' = T) and three values between max alpha_i'(0) and 1.
    The smallest resulting N* wins, ties going to the longer prefix T'.
    """
    best, key = None, None
    for e in _eps_candidates(p, samples):
        rep = compute_Nstar(p, e, samples)
        if not rep.ok:
            continue
        k = (rep.N_star, -rep.T_prime)
        if key is None or k < key:
            best, key = e, k
    if best is None:
        raise RefineError("no slope bound eps < 1 admits a prefix [0, T']")
    return best


def refine_grid(T_prime: float, T: float, grid: int, t_min: float = T_MIN) -> tuple[np.ndarray, int]:
    """Nodes 0, geometric t_min..T', then uniform T'..T; returns (nodes, index of T')."""
    if T_prime >= T * (1 - 1e-12):
        geo = np.geomspace(t_min, T, grid - 1)
        return np.concatenate(([0.0], geo)), grid - 1
    n_geo = max(16, grid // 2)
    geo = np.geomspace(t_min, T_prime, n_geo)
    step = max(geo[-1] - geo[-2], (T - T_prime) / max(grid - n_geo, 1))
    n_uni = max(2, int(math.ceil((T - T_prime) / step)) + 1)
    uni = np.linspace(T_prime, T, n_uni)[1:]
    return np.concatenate(([0.0], geo, uni)), n_geo


def _u_form(p: Problem, xhat, assignment, N_star: int) -> SecondKindForm:
    try:
        tail = residual_series(p, xhat)
    except TaylorError:
        tail = None

    def rhs(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros((len(t), p.m))
        pos = t > 0
        if np.any(pos):
            out[pos] = residual_gamma(p, xhat, assignment, N_star, t[pos], tail)
        return out

    return SecondKindForm(p, weight_power=N_star, rhs=rhs)


def iterate_u(p: Problem, xhat: LogPowerExpansion, assignment, N_star: int, nodes: np.ndarray,
              tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
              form: SecondKindForm | None = None) -> GridSolution:
    """u on ``nodes`` (starting at 0) by successive approximations in a weighted norm.

    l starts at 1/T' and doubles until the discrete bound ||L||_l + ||K||_l < 1;
    the cap is l <= 2^16/T'.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes[0] != 0.0:
        raise ValueError("the grid must start at t = 0")
    Tp = float(nodes[-1])
    form = form or _u_form(p, xhat, assignment, N_star)
    ks = np.arange(len(nodes))
    functional = form.functional(nodes)
    bounds = form.bounds(nodes)
    A_L = assemble(form, nodes, ks, functional, bounds, parts=("functional",))
    A_K = assemble(form, nodes, ks, functional, bounds, parts=("integral",))
    bn_L = block_norms(A_L, p.m)
    bn_K = block_norms(A_K, p.m)
    l = 1.0 / Tp
    while True:
        wn = WeightedNorm(l)
        qL, qK = wn.operator_bound(nodes, bn_L), wn.operator_bound(nodes, bn_K)
        if qL + qK < 1.0:
            break
        if qL >= 1.0 and not np.any(bn_K):
            raise RefineError(f"functional part does not contract (bound {qL:.3g}); N* is too small")
        if l * 2 > L_CAP_FACTOR / Tp:
            raise RefineError(f"no contraction up to l = {l:.3g}: ||L||_l = {qL:.3g}, ||K||_l = {qK:.3g}")
        l *= 2
    A = A_L + A_K if sparse.issparse(A_K) else A_K + A_L.toarray()
    gamma = form.rhs(nodes)
    w = wn.weights(nodes)
    try:
        u, info = picard(A, gamma, gamma, tol * float(w.min()), max_iter, w)
    except ConvergenceError as err:
        raise RefineError(f"iteration for u failed: {err}") from err
    meta = {"l": l, "q_L": qL, "q_K": qK, "iterations": info["iterations"],
            "ratios": info["ratios"], "last_diff": info["last_diff"]}
    return GridSolution(nodes, u, meta)


@dataclass
class ParametricSolution:
    expansion: LogPowerExpansion
    assignment: dict
    N_star: int
    u: GridSolution
    T_prime: float
    x: GridSolution
    reports: dict = field(default_factory=dict)

    def __call__(self, t) -> np.ndarray:
        """xhat(t) + t^N* u(t); u is interpolated linearly between nodes."""
        t = np.asarray(t, dtype=float)
        return eval_expansion(self.expansion, t, self.assignment) + (t**self.N_star)[..., None] * self.u(t)


def full_solution(p: Problem, assignment: Mapping[str, float] | None = None, N: int = 3,
                  grid: int = 4097, eps: float | None = None, N_star: int | None = None,
                  t_min: float = T_MIN, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                  samples: int = DEFAULT_SAMPLES, expansion: LogPowerExpansion | None = None
                  ) -> ParametricSolution:
    """Member of the solution family fixed by ``assignment``, on [0, T]."""
    xhat = expansion if expansion is not None else build_expansion(p, N)
    N = xhat.N
    assignment = dict(assignment or {})
    xhat.registry.vector(assignment)  # fail early on bad names
    eps = default_eps(p, samples) if eps is None else eps
    rep: NStarReport = compute_Nstar(p, eps, samples)
    if not rep.ok:
        raise RefineError(f"N* undetermined: {rep.detail}")
    Ns = rep.N_star if N_star is None else int(N_star)
    if N < Ns:
        raise RefineError(f"expansion order N = {N} is below N* = {Ns}")
    gp = gamma_profile(p, xhat, assignment, Ns, t_min, min(1e-2, rep.T_prime))
    if gp["blowup"]:
        raise RefineError(f"gamma grows like t^{gp['slope']:.2f} as t -> 0; the expansion order is too low")

    nodes, i_tp = refine_grid(rep.T_prime, p.T, grid, t_min)
    form = _u_form(p, xhat, assignment, Ns)
    u0 = iterate_u(p, xhat, assignment, Ns, nodes[: i_tp + 1], tol, max_iter, form)
    values = np.zeros((len(nodes), p.m))
    values[: i_tp + 1] = u0.values
    cont = []
    if i_tp < len(nodes) - 1:
        try:
            ivs = discrete_intervals(form, nodes, rep.T_prime, 1.0, first_end=i_tp)
            functional = form.functional(nodes)
            bounds = form.bounds(nodes)
            for s, e in ivs[1:]:
                us, info = advance(form, nodes, values, s, e, tol, max_iter, functional, bounds)
                values[s + 1 : e + 1] = us
                cont.append({"interval": [int(s), int(e)], "iterations": info["iterations"]})
        except (StepPlanError, ConvergenceError) as err:
            raise RefineError(f"continuation past T' = {rep.T_prime:.6g} is not justified: {err}") from err
    u = GridSolution(nodes, values, u0.meta)

    keep = nodes >= t_min
    tk = nodes[keep]
    xv = eval_expansion(xhat, tk, assignment) + (tk**Ns)[:, None] * values[keep]
    meta = {"N": N, "N_star": Ns, "eps": eps, "T_prime": rep.T_prime, "t_min": t_min,
            "l": u0.meta["l"], "q_L": u0.meta["q_L"], "q_K": u0.meta["q_K"],
            "iterations": u0.meta["iterations"]}
    meta.update(zip(xhat.registry.ids, xhat.registry.vector(assignment)[1:].tolist()))
    x = GridSolution(tk, xv, meta, head=lambda s: eval_expansion(xhat, s, assignment))
    reports = {"N_star": rep.to_dict(), "gamma": gp, "continuation": cont, "iteration": u0.meta}
    return ParametricSolution(xhat, assignment, Ns, u, rep.T_prime, x, reports)
