"""Solvability conditions and step-method parameters.

All suprema are taken over dense sample grids; this is a numerical
surrogate for the analytic bounds and every report records the grid size.
Operator norms are spectral norms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import EvalError, PreconditionError, SingularKernelError, StepPlanError
from .model import Problem, inverse_diag

__all__ = [
    "ConditionAReport",
    "StepPlan",
    "NStarReport",
    "capD",
    "capD_grid",
    "check_condition_A",
    "plan_steps",
    "compute_Nstar",
    "SAFETY",
    "DEFAULT_SAMPLES",
]

SAFETY = 0.9
DEFAULT_SAMPLES = 512
MIN_EPS_LOG2 = 10


def _spec_norm(M: np.ndarray) -> np.ndarray:
    return np.linalg.svd(M, compute_uv=False)[..., 0]


def capD_grid(p: Problem, t) -> np.ndarray:
    """D(t) on an array of points."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    total = np.zeros(t.shape)
    if p.n == 1:
        return total
    Kinv = inverse_diag(p, t)
    for i in range(1, p.n):
        total += np.abs(p.alpha_prime(i, t)) * _spec_norm(Kinv @ p.jump(i, t))
    return total


def capD(p: Problem, t: float) -> float:
    """Sum over curves of |alpha_i'(t)| * ||K_n(t,t)^{-1} (K_i - K_{i+1})(t, alpha_i(t))||."""
    return float(capD_grid(p, [t])[0])


@dataclass
class ConditionAReport:
    D0: float
    q: float
    c: float
    h1: float
    holds: bool
    samples: int
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _sup_normalized_kernel(p: Problem, grid: np.ndarray) -> float:
    """max over sampled 0 <= s <= t of ||K_n(t,t)^{-1} K(t,s)||, region closures included."""
    Kinv = inverse_diag(p, grid)
    th = np.linspace(0.0, 1.0, max(9, min(65, len(grid) // 8)))
    best = 0.0
    for i in range(1, p.n + 1):
        lo, hi = p.alpha(i - 1, grid), p.alpha(i, grid)
        ss = lo[:, None] + th[None, :] * (hi - lo)[:, None]
        K = p.piece(i, grid[:, None], ss)
        best = max(best, float(np.max(_spec_norm(Kinv[:, None] @ K))))
    return best


def check_condition_A(p: Problem, samples: int = DEFAULT_SAMPLES) -> ConditionAReport:
    """Evaluate condition (A) on a grid of ``samples`` points of [0, T].

    h1 is the largest sampled prefix of [0, T] on which D stays below one and
    q is the maximum of D there.
    """
    grid = np.linspace(0.0, p.T, samples)
    try:
        D = capD_grid(p, grid)
    except (SingularKernelError, EvalError) as err:
        return ConditionAReport(float("nan"), float("nan"), float("inf"), 0.0, False, samples, str(err))
    D0 = float(D[0])
    bad = np.nonzero(D >= 1.0)[0]
    if len(bad) == 0:
        h1, q = p.T, float(D.max())
    elif bad[0] == 0:
        h1, q = 0.0, D0
    else:
        h1, q = float(grid[bad[0] - 1]), float(D[: bad[0]].max())
    try:
        c = _sup_normalized_kernel(p, grid)
    except (SingularKernelError, EvalError) as err:
        return ConditionAReport(D0, q, float("inf"), h1, False, samples, str(err))
    holds = bool(D0 < 1.0 and math.isfinite(c) and h1 > 0)
    detail = "" if holds else ("D(0) >= 1" if D0 >= 1.0 else "c is not finite")
    return ConditionAReport(D0, q, c, h1, holds, samples, detail)


@dataclass
class StepPlan:
    h: float
    epsilon: float
    intervals: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"h": self.h, "epsilon": self.epsilon, "intervals": [list(iv) for iv in self.intervals]}


def _intervals(h: float, eps: float, T: float) -> list[tuple[float, float]]:
    out = [(0.0, min(h, T))]
    m = 1
    while out[-1][1] < T:
        a = out[-1][1]
        b = (1.0 + m * eps) * h
        if b >= T or (T - b) <= 1e-12 * T:
            b = T
        out.append((a, b))
        m += 1
    return out


def _inclusion_holds(p: Problem, intervals, per_interval: int = 16) -> bool:
    th = np.linspace(0.0, 1.0, per_interval)
    for a, b in intervals[1:]:
        t = a + th * (b - a)
        tol = 1e-12 * max(1.0, p.T)
        for i in range(1, p.n):
            if np.any(p.alpha(i, t) > a + tol):
                return False
    return True


def plan_steps(p: Problem, rep: ConditionAReport) -> StepPlan:
    """Choose h and epsilon for the interval splitting [0,h], [h, h+eps*h], ...

    h = 0.9 * min(h1, (1-q)/c); epsilon is the largest power of two in
    (0, 1] for which every retarded argument alpha_i(t), t in I_m, falls into
    the already covered part [0, start of I_m].
    """
    if not rep.holds:
        raise PreconditionError("condition (A) does not hold; the step method is not applicable")
    bound = (1.0 - rep.q) / rep.c if rep.c > 0 else math.inf
    h = SAFETY * min(rep.h1, bound)
    if not h > 0:
        raise StepPlanError("no admissible first step h > 0")
    for k in range(MIN_EPS_LOG2 + 1):
        eps = 2.0**-k
        ivs = _intervals(h, eps, p.T)
        if _inclusion_holds(p, ivs):
            return StepPlan(h, eps, ivs)
    raise StepPlanError(f"no admissible epsilon >= 2^-{MIN_EPS_LOG2} for h={h:.6g}")


@dataclass
class NStarReport:
    epsilon: float
    T_prime: float
    N_star: int | None
    q_D: float
    sup_D: float
    ok: bool
    samples: int
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def compute_Nstar(p: Problem, eps: float, samples: int = DEFAULT_SAMPLES, bound: float = SAFETY) -> NStarReport:
    """Prefix length T' and the smallest N* with eps^N* * sup D <= 0.9 on (0, T')."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    grid = np.linspace(0.0, p.T, samples)
    tol = 1e-12
    good = np.ones(samples, dtype=bool)
    for i in range(1, p.n):
        slope = np.abs(p.alpha_prime(i, grid))
        ratio = np.empty(samples)
        ratio[0] = slope[0]
        ratio[1:] = p.alpha(i, grid[1:]) / grid[1:]
        good &= (slope <= eps + tol) & (ratio <= eps + tol)
    if not good[0]:
        return NStarReport(eps, 0.0, None, float("nan"), float("nan"), False, samples,
                           "no prefix of [0,T] satisfies the slope bounds for this eps")
    cut = samples if good.all() else int(np.argmin(good))
    T_prime = float(grid[cut - 1]) if cut < samples else p.T
    try:
        sup_D = float(capD_grid(p, grid[:cut]).max())
    except SingularKernelError as err:
        return NStarReport(eps, T_prime, None, float("nan"), float("nan"), False, samples, str(err))
    if sup_D <= bound:
        N = 0
    else:
        N = max(0, math.ceil(math.log(bound / sup_D) / math.log(eps)))
        while eps**N * sup_D > bound:  # guard against rounding in the logarithms
            N += 1
        while N > 0 and eps ** (N - 1) * sup_D <= bound:
            N -= 1
    return NStarReport(eps, T_prime, N, eps**N * sup_D, sup_D, True, samples)
