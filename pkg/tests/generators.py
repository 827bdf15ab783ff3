"""Random scalar problems with prescribed roots of the characteristic function.

For m = 1, B(j) = c + sum_i beta_i^(1+j) Delta_i.  Prescribing roots j* of
multiplicity k gives linear conditions on (c, Delta_1..Delta_{n-1}); with
n - 1 equal to the number of conditions the solution is unique up to
scale.  The construction runs in 50-digit arithmetic and is rounded to
double only when the problem file is written.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np

from pwvolterra.model import problem_from_dict

mp.mp.dps = 50


def _fmt(x) -> str:
    return repr(float(x))


def engineered(rng: np.random.Generator, roots: dict[int, int], smooth: bool = True):
    """Problem whose B has exactly the roots ``roots`` = {j: multiplicity}, plus construction data."""
    conds = sum(roots.values())
    n = conds + 1
    betas = sorted(mp.mpf(float(b)) for b in rng.uniform(0.15, 0.85, n - 1))
    while any(b2 - b1 < 0.05 for b1, b2 in zip(betas, betas[1:])):
        betas = sorted(mp.mpf(float(b)) for b in rng.uniform(0.15, 0.85, n - 1))
    rows = []
    for j, k in sorted(roots.items()):
        for q in range(k):
            # d^q/dj^q of c + sum beta^(1+j) Delta at j
            rows.append([mp.mpf(1) if q == 0 else mp.mpf(0)]
                        + [b ** (1 + j) * mp.log(b) ** q for b in betas])
    A = mp.matrix(rows)
    # null vector: fix c = 1 and solve for Delta
    sub = mp.matrix([[A[r, c] for c in range(1, n)] for r in range(conds)])
    rhs = mp.matrix([-A[r, 0] for r in range(conds)])
    delta = mp.lu_solve(sub, rhs)
    c = mp.mpf(1)
    scale = rng.uniform(0.5, 2.0) * (1 if rng.random() < 0.5 else -1)
    c *= scale
    delta = [d * scale for d in delta]
    # pieces: K_n = c, K_i = K_{i+1} + Delta_i
    K = [None] * n
    K[n - 1] = c
    for i in range(n - 2, -1, -1):
        K[i] = K[i + 1] + delta[i]
    kernels = []
    for i in range(n):
        e = _fmt(K[i])
        if smooth:
            a1, a2 = rng.uniform(-0.5, 0.5, 2)
            e = f"{e} + {float(a1)!r}*t*s + {float(a2)!r}*s^2"
        kernels.append([[e]])
    alphas = [f"{_fmt(b)}*t" for b in betas]
    f = "sin(t) + t^2" if smooth else "t"
    d = {"name": "engineered", "m": 1, "n": n, "T": 1.0, "alphas": alphas, "kernels": kernels, "f": [f]}
    return problem_from_dict(d), {"betas": betas, "c": c, "delta": delta}


def random_scalar(rng: np.random.Generator):
    """Either a regular problem or one with a single prescribed multiple root at j in {0,1,2}."""
    if rng.random() < 0.25:
        n = int(rng.integers(2, 4))
        betas = np.sort(rng.uniform(0.2, 0.8, n - 1))
        K = rng.uniform(0.5, 2.0, n) * rng.choice([-1, 1], n)
        d = {"m": 1, "n": n, "T": 1.0, "alphas": [f"{float(b)!r}*t" for b in betas],
             "kernels": [[[repr(float(k))]] for k in K], "f": ["t"]}
        betas_mp = [mp.mpf(float(b)) for b in betas]
        delta = [mp.mpf(float(K[i] - K[i + 1])) for i in range(n - 1)]
        return problem_from_dict(d), {"betas": betas_mp, "c": mp.mpf(float(K[-1])), "delta": delta}
    j = int(rng.integers(0, 3))
    k = int(rng.integers(1, 4))
    return engineered(rng, {j: k})


def multiplicity_oracle(data: dict, j: int, kmax: int = 6, rel: float = 1e-9) -> int:
    """Order of vanishing of B at j, from high-precision numerical differentiation of B itself."""
    betas, c, delta = data["betas"], data["c"], data["delta"]

    def Bf(x):
        return c + sum(b ** (1 + x) * d for b, d in zip(betas, delta))

    scale = abs(c) + sum(abs(d) for d in delta)
    for k in range(kmax + 1):
        v = mp.diff(Bf, mp.mpf(j), k)
        if abs(v) > rel * scale:
            return k
    return kmax + 1
