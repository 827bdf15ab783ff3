"""Log-power expansions x(t) ~ sum_j x_j(ln t) t^j near t = 0.

Each coefficient x_j is a polynomial in z = ln t whose coefficients are
affine in a set of free parameters c1..cP.  Internally a polynomial is an
array of shape (deg+1, P+1, m): axis 0 is the power of z, axis 1 selects
the constant part (index 0) or the multiplier of parameter c_k (index k).

Coefficients are found order by order.  Substituting the partial
expansion into the differentiated equation (with Taylor polynomials of
the data) and collecting the t^J terms gives the difference equation

    K_n(0,0) x_J(z) + sum_i beta_i^(1+J) Delta_i x_J(z + a_i) = rhs_J(z),

which is solved by undetermined coefficients.  At singular points of B the
homogeneous solutions built from Jordan chains enter as new parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping

import numpy as np

from . import _quad
from . import expr as ex
from .charop import (CharOperator, JordanData, ScanResult, SingularPointInfo, B_deriv, build_charop,
                     scan)
from .errors import EvalError, ExpansionError, TaylorError, UnresolvedIndexError
from .model import Problem

__all__ = [
    "Param",
    "ParamRegistry",
    "AffineVec",
    "ZPoly",
    "LogPowerExpansion",
    "TaylorData",
    "taylor_data",
    "integrate_logpoly",
    "apply_F_truncated",
    "solve_coefficient",
    "build_expansion",
    "eval_expansion",
    "apply_F",
    "loglog_slope",
    "residual_slope",
    "residual_series",
]

# relative roundoff floor for residual slope fits
FLOOR_FACTOR = 1e3 * np.finfo(float).eps


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Param:
    id: str
    j: int
    chain: int
    degree: int

    def to_dict(self) -> dict:
        return {"id": self.id, "j": self.j, "chain": self.chain, "degree": self.degree}


@dataclass
class ParamRegistry:
    params: list[Param] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.params]

    def add(self, j: int, chain: int, degree: int) -> int:
        """Register a parameter; returns its column (1-based) in coefficient arrays."""
        self.params.append(Param(f"c{len(self.params) + 1}", j, chain, degree))
        return len(self.params)

    def vector(self, assignment: Mapping[str, float] | None) -> np.ndarray:
        """[1, c1, ..., cP] from a name -> value mapping.

        With a single parameter the names ``c`` and ``d`` are accepted as aliases of ``c1``.
        """
        assignment = dict(assignment or {})
        if len(self.params) == 1:
            for alias in ("c", "d"):
                if alias in assignment:
                    if "c1" in assignment:
                        raise ValueError(f"both c1 and its alias {alias} given")
                    assignment["c1"] = assignment.pop(alias)
        unknown = set(assignment) - set(self.ids)
        if unknown:
            raise ValueError(f"unknown parameter(s) {sorted(unknown)}; known: {self.ids or 'none'}")
        missing = [i for i in self.ids if i not in assignment]
        if missing:
            raise ValueError(f"no value for parameter(s) {missing}")
        return np.array([1.0] + [float(assignment[i]) for i in self.ids])

    def to_dict(self) -> list[dict]:
        return [p.to_dict() for p in self.params]


@dataclass
class AffineVec:
    """base + sum_k c_k * terms[k]."""

    base: np.ndarray
    terms: dict[str, np.ndarray]

    @classmethod
    def from_array(cls, arr: np.ndarray, registry: ParamRegistry) -> "AffineVec":
        return cls(arr[0].copy(), {pid: arr[k + 1].copy() for k, pid in enumerate(registry.ids)
                                   if k + 1 < len(arr) and np.any(arr[k + 1] != 0)})

    def evaluate(self, assignment: Mapping[str, float]) -> np.ndarray:
        out = self.base.copy()
        for k, v in self.terms.items():
            out = out + float(assignment[k]) * v
        return out


def _pad(arr: np.ndarray, deg: int | None = None, P: int | None = None) -> np.ndarray:
    d0, p0, m = arr.shape
    d1 = d0 if deg is None else max(d0, deg + 1)
    p1 = p0 if P is None else max(p0, P + 1)
    if (d1, p1) == (d0, p0):
        return arr
    out = np.zeros((d1, p1, m))
    out[:d0, :p0] = arr
    return out


def _trim(arr: np.ndarray, atol: float = 0.0) -> np.ndarray:
    d = arr.shape[0]
    while d > 1 and np.all(np.abs(arr[d - 1]) <= atol):
        d -= 1
    return arr[:d]


@dataclass
class ZPoly:
    coeffs: np.ndarray  # (deg+1, P+1, m)

    @property
    def degree(self) -> int:
        nz = [k for k in range(self.coeffs.shape[0]) if np.any(self.coeffs[k] != 0)]
        return nz[-1] if nz else -1

    def coefficient(self, k: int, registry: ParamRegistry) -> AffineVec:
        return AffineVec.from_array(self.coeffs[k], registry)

    def evaluate(self, z, cvec: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        vals = np.einsum("kpm,p->km", self.coeffs[:, : len(cvec)], cvec[: self.coeffs.shape[1]])
        out = np.zeros(z.shape + (vals.shape[1],))
        for k in range(vals.shape[0] - 1, -1, -1):  # Horner
            out = out * z[..., None] + vals[k]
        return out


@dataclass
class LogPowerExpansion:
    coeffs: list[ZPoly]
    N: int
    registry: ParamRegistry
    m: int
    diagnostics: dict = field(default_factory=dict)

    def degrees(self) -> list[int]:
        return [c.degree for c in self.coeffs]

    def __call__(self, t, assignment: Mapping[str, float] | None = None) -> np.ndarray:
        return eval_expansion(self, t, assignment)

    def to_dict(self) -> dict:
        out = []
        for j, c in enumerate(self.coeffs):
            zs = []
            for k in range(c.coeffs.shape[0]):
                av = c.coefficient(k, self.registry)
                if not np.any(av.base) and not av.terms:
                    continue
                zs.append({"k": k, "base": av.base.tolist(),
                           "params": {pid: v.tolist() for pid, v in av.terms.items()}})
            out.append({"j": j, "z_powers": zs})
        return {"N": self.N, "m": self.m, "parameters": self.registry.to_dict(), "coefficients": out}

    def pretty(self, digits: int = 10) -> list[str]:
        """One line per component: x_a(t) ~ sum of (affine coefficient) * ln(t)^k * t^j."""
        lines = []
        for a in range(self.m):
            terms = []
            for j, c in enumerate(self.coeffs):
                for k in range(c.coeffs.shape[0]):
                    row = c.coeffs[k, :, a]
                    parts = []
                    if row[0] != 0:
                        parts.append(format(row[0], f".{digits}g"))
                    for q, pid in enumerate(self.registry.ids, start=1):
                        if q < len(row) and row[q] != 0:
                            parts.append(pid if row[q] == 1 else f"{row[q]:.{digits}g}*{pid}")
                    if not parts:
                        continue
                    coef = parts[0] if len(parts) == 1 else "(" + " + ".join(parts) + ")"
                    fac = ([f"ln(t)^{k}" if k > 1 else "ln(t)"] if k else []) + (
                        [f"t^{j}" if j > 1 else "t"] if j else [])
                    terms.append("*".join([coef] + fac))
            body = " + ".join(terms).replace("+ -", "- ") if terms else "0"
            lines.append(f"x{a + 1}(t) ~ {body}")
        return lines


def eval_expansion(xhat: LogPowerExpansion, t, assignment: Mapping[str, float] | None = None) -> np.ndarray:
    """sum_j x_j(ln t) t^j with the parameters substituted; shape t.shape + (m,)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("the expansion is defined for t > 0 only")
    cvec = xhat.registry.vector(assignment)
    z = np.log(t)
    out = np.zeros(t.shape + (xhat.m,))
    for j in range(len(xhat.coeffs) - 1, -1, -1):
        out = out * t[..., None] + xhat.coeffs[j].evaluate(z, cvec)
    return out


# ---------------------------------------------------------------------------
# Taylor data


@dataclass
class TaylorData:
    N: int
    K: np.ndarray      # (n, N+1, N+1, m, m): K[i-1, a, b] multiplies t^a s^b
    f: np.ndarray      # (N+2, m)
    alpha: np.ndarray  # (n+1, N+2): alpha_i(t) = sum_nu alpha[i, nu] t^nu

    def kernel_poly(self, i: int, t, s) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = np.asarray(s, dtype=float)
        out = 0.0
        for a in range(self.N + 1):
            for b in range(self.N + 1 - a):
                out = out + np.multiply.outer(t**a * s**b, self.K[i - 1, a, b])
        return out


def _value_at_origin(e: ex.Expr, where: str) -> float:
    try:
        v = float(ex.evaluate(e, {"t": 0.0, "s": 0.0}))
    except EvalError as err:
        raise TaylorError(f"{where} is not smooth at the origin: {err}") from None
    if not math.isfinite(v):
        raise TaylorError(f"{where} is not finite at the origin")
    return v


def _taylor2(e: ex.Expr, N: int, where: str) -> np.ndarray:
    out = np.zeros((N + 1, N + 1))
    ds = e
    for b in range(N + 1):
        dt = ds
        for a in range(N + 1 - b):
            out[a, b] = _value_at_origin(dt, where) / (math.factorial(a) * math.factorial(b))
            dt = ex.differentiate(dt, "t")
        ds = ex.differentiate(ds, "s")
    return out


def _taylor1(e: ex.Expr, N: int, where: str) -> np.ndarray:
    out = np.zeros(N + 1)
    d = e
    for a in range(N + 1):
        out[a] = _value_at_origin(d, where) / math.factorial(a)
        d = ex.differentiate(d, "t")
    return out


def taylor_data(p: Problem, N: int) -> TaylorData:
    """Taylor coefficients at the origin: kernels to total degree N, f and alpha to degree N+1."""
    if N < 0:
        raise ValueError("N must be non-negative")
    m, n = p.m, p.n
    K = np.zeros((n, N + 1, N + 1, m, m))
    for i, piece in enumerate(p.pieces):
        for a in range(m):
            for b in range(m):
                K[i, :, :, a, b] = _taylor2(piece.entries[a][b], N, f"kernel {i + 1} entry ({a + 1},{b + 1})")
    f = np.stack([_taylor1(e, N + 1, f"f component {a + 1}") for a, e in enumerate(p.f)], axis=-1)
    alpha = np.zeros((n + 1, N + 2))
    for i, bc in enumerate(p.boundaries, start=1):
        alpha[i] = _taylor1(bc.alpha, N + 1, f"alpha_{i}")
    alpha[n, 1] = 1.0
    return TaylorData(N, K, f, alpha)


# ---------------------------------------------------------------------------
# polynomial algebra in z = ln t


def integrate_logpoly(j: int, k: int) -> list[Fraction]:
    """Coefficients c_s of ln^(k-s) t, s = 0..k, in int t^j ln^k t dt = t^(j+1) sum_s c_s ln^(k-s) t."""
    if j < 0 or k < 0:
        raise ValueError("j and k must be non-negative")
    return [Fraction((-1) ** s * math.factorial(k) // math.factorial(k - s), (j + 1) ** (s + 1))
            for s in range(k + 1)]


def _integrate(X: np.ndarray, p: int) -> np.ndarray:
    """Q with d/ds [s^(p+1) Q(ln s)] = s^p X(ln s)."""
    Y = np.zeros_like(X)
    for k in range(X.shape[0]):
        for s, c in enumerate(integrate_logpoly(p, k)):
            Y[k - s] += float(c) * X[k]
    return Y


def _zshift(X: np.ndarray, a: float) -> np.ndarray:
    d = X.shape[0]
    S = np.zeros((d, d))
    for e in range(d):
        for k in range(e, d):
            S[e, k] = math.comb(k, e) * a ** (k - e)
    return np.einsum("ek,k...->e...", S, X)


def _zderiv(X: np.ndarray) -> np.ndarray:
    Y = np.zeros_like(X)
    for e in range(X.shape[0] - 1):
        Y[e] = (e + 1) * X[e + 1]
    return Y


def _smul(a: np.ndarray, b: np.ndarray, M: int) -> np.ndarray:
    return np.convolve(a[:M], b[:M])[:M]


def _spow(a: np.ndarray, k: int, M: int) -> np.ndarray:
    out = np.zeros(M)
    out[0] = 1.0
    for _ in range(k):
        out = _smul(out, a, M)
    return out


def _slog1p(r: np.ndarray, M: int) -> np.ndarray:
    out = np.zeros(M)
    rq = np.zeros(M)
    rq[0] = 1.0
    for q in range(1, M):
        rq = _smul(rq, r, M)
        out += (-1) ** (q + 1) * rq / q
    return out


class _Curve:
    """Series data of a boundary curve alpha(t) = beta t (1 + rho(t)), truncated to M terms."""

    def __init__(self, coeffs: np.ndarray, M: int):
        self.M = M
        self.coeffs = coeffs
        self.beta = float(coeffs[1])
        if not self.beta > 0:
            raise ExpansionError("boundary curve with alpha'(0) <= 0")
        self.a = math.log(self.beta)
        rho = np.zeros(M)
        rho[1:] = coeffs[2 : M + 1] / self.beta
        self.rho = rho
        self.lam = _slog1p(rho, M)
        self.series = coeffs[:M].copy()
        self.slope = np.array([(nu + 1) * coeffs[nu + 1] for nu in range(M)])
        self._lam_pow = [_spow(self.lam, q, M) / math.factorial(q) for q in range(M)]
        self._one_rho = {}

    def one_plus_rho_pow(self, p: int) -> np.ndarray:
        if p not in self._one_rho:
            base = self.rho.copy()
            base[0] += 1.0
            self._one_rho[p] = _spow(base, p, self.M)
        return self._one_rho[p]

    def compose(self, X: np.ndarray, p: int, M: int) -> np.ndarray:
        """Series of t^(-p) alpha(t)^p X(ln alpha(t)), shape (M, *X.shape)."""
        out = np.zeros((M,) + X.shape)
        D = X
        for q in range(min(X.shape[0], M)):
            Y = _zshift(D, self.a)
            out += np.multiply.outer(self._lam_pow[q][:M], Y)
            D = _zderiv(D)
        w = self.beta**p * self.one_plus_rho_pow(p)[:M]
        conv = np.zeros_like(out)
        for nu in range(M):
            for mu in range(M - nu):
                conv[nu + mu] += w[nu] * out[mu]
        return conv


def _kernel_on_curve(td: TaylorData, i: int, curve: _Curve, M: int) -> np.ndarray:
    """Matrix series of K_i(t, alpha(t))."""
    m = td.K.shape[-1]
    out = np.zeros((M, m, m))
    Apow = np.zeros(M)
    Apow[0] = 1.0
    for b in range(M):
        for a in range(M - b):
            sh = np.zeros(M)
            sh[a:] = Apow[: M - a]
            out += np.multiply.outer(sh, td.K[i - 1, a, b])
        Apow = _smul(Apow, curve.series, M)
    return out


def _mat_apply(E: np.ndarray, W: np.ndarray, R: np.ndarray, offset: int) -> None:
    """R[offset + nu + mu] += E[nu] @ W[mu] (matrix series times vector-poly series)."""
    top = R.shape[0]
    for nu in range(E.shape[0]):
        for mu in range(W.shape[0]):
            k = offset + nu + mu
            if k >= top:
                break
            R[k] += np.einsum("ab,...b->...a", E[nu], W[mu])


def _residual_arrays(td: TaylorData, n: int, Xs: list[np.ndarray], N: int) -> np.ndarray:
    """Coefficients of t^0..t^N of F applied to sum_j X_j(ln t) t^j with Taylor-truncated data."""
    m = td.K.shape[-1]
    if Xs:
        d = max(X.shape[0] for X in Xs)
        P = max(X.shape[1] for X in Xs) - 1
        Xs = [_pad(X, d - 1, P) for X in Xs]
        shape = Xs[0].shape
    else:
        shape = (1, 1, m)
    M = N + 1
    R = np.zeros((M,) + shape)
    curves = {i: _Curve(td.alpha[i], M) for i in range(1, n)}

    # K_n(t, t) x(t)
    Kd = np.zeros((M, m, m))
    for a in range(M):
        for b in range(M - a):
            Kd[a + b] += td.K[n - 1, a, b]
    for j, X in enumerate(Xs):
        _mat_apply(Kd, X[None], R, j)

    # alpha_i'(t) (K_i - K_{i+1})(t, alpha_i(t)) x(alpha_i(t))
    for i, c in curves.items():
        jump = _kernel_on_curve(td, i, c, M) - _kernel_on_curve(td, i + 1, c, M)
        E = np.zeros_like(jump)
        for nu in range(M):
            for mu in range(M - nu):
                E[nu + mu] += c.slope[nu] * jump[mu]
        for j, X in enumerate(Xs):
            if j < M:
                _mat_apply(E, c.compose(X, j, M - j), R, j)

    # sum_i int_{alpha_{i-1}}^{alpha_i} dK_i/dt (t, s) x(s) ds
    cache: dict = {}

    def at_curve(i, j, p, Q, length):
        key = (i, j, p)
        if key not in cache:
            if i == 0:
                cache[key] = None
            elif i == n:
                cache[key] = Q[None]
            else:
                cache[key] = curves[i].compose(Q, p + 1, M)
        v = cache[key]
        return None if v is None else v[:length]

    for j, X in enumerate(Xs):
        for b in range(M):
            p = b + j
            if p + 1 >= M:
                break
            Q = _integrate(X, p)
            for i in range(1, n + 1):
                for a in range(M - p - 1):
                    G = (a + 1) * td.K[i - 1, a + 1, b]
                    if not np.any(G):
                        continue
                    length = M - (a + p + 1)
                    hi = at_curve(i, j, p, Q, length)
                    lo = at_curve(i - 1, j, p, Q, length)
                    D = hi.copy()
                    if lo is not None:
                        Dn = np.zeros((length,) + shape)
                        Dn[: hi.shape[0]] += hi
                        Dn[: lo.shape[0]] -= lo
                        D = Dn
                    _mat_apply(G[None], D, R, a + p + 1)

    # - f'(t)
    for J in range(M):
        R[J, 0, 0] -= (J + 1) * td.f[J + 1]
    return R


def apply_F_truncated(p: Problem, td: TaylorData, xhat: LogPowerExpansion, N: int) -> LogPowerExpansion:
    """Truncated residual F(xhat) through order t^N, as an expansion in the same parameters."""
    Xs = [c.coeffs for c in xhat.coeffs]
    R = _residual_arrays(td, p.n, Xs, N)
    return LogPowerExpansion([ZPoly(R[J]) for J in range(N + 1)], N, xhat.registry, p.m)


def residual_series(p: Problem, xhat: LogPowerExpansion, extra: int = 4) -> LogPowerExpansion:
    """Taylor series of F(xhat) through t^(N+extra); the orders up to N are zero by construction.

    Near t = 0 this is far more accurate than evaluating F with the exact
    data, whose value there is pure cancellation error.
    """
    N = xhat.N
    td = taylor_data(p, N + extra)
    R = _residual_arrays(td, p.n, [c.coeffs for c in xhat.coeffs], N + extra)
    R[: N + 1] = 0.0
    return LogPowerExpansion([ZPoly(R[J]) for J in range(N + extra + 1)], N + extra, xhat.registry, p.m)


# ---------------------------------------------------------------------------
# coefficient equations


def _operator_matrix(Bd: list[np.ndarray], D: int) -> np.ndarray:
    """Matrix of X -> sum_q C(e+q, q) B^(q) X_{e+q} on polynomials of degree <= D."""
    m = Bd[0].shape[0]
    M = np.zeros(((D + 1) * m, (D + 1) * m))
    for e in range(D + 1):
        for q in range(D - e + 1):
            M[e * m : (e + 1) * m, (e + q) * m : (e + q + 1) * m] = math.comb(e + q, q) * Bd[q]
    return M


def solve_coefficient(op: CharOperator, j: int, info: SingularPointInfo, rhs: ZPoly | np.ndarray,
                      jd: JordanData | None = None, registry: ParamRegistry | None = None,
                      tol: float = 1e-9) -> ZPoly:
    """Polynomial solution of K_n(0,0) x(z) + sum_i beta_i^(1+j) Delta_i x(z + a_i) = rhs(z).

    At a regular point the solution is unique and found by back substitution
    from the top power of z.  At a singular point the ansatz degree is raised
    by the longest chain length, a minimum-norm particular solution is taken
    and one fresh parameter per homogeneous solution y_l(z) = sum_r chi_r
    z^(l-r)/(l-r)! is registered.
    """
    R = rhs.coeffs if isinstance(rhs, ZPoly) else np.asarray(rhs, dtype=float)
    m = op.m
    scale = op.scale
    rmax = float(np.max(np.abs(R))) if R.size else 0.0
    R = _trim(R, 1e-14 * max(rmax, 1e-300))
    d = R.shape[0] - 1

    if not info.is_singular:
        Bd = [B_deriv(op, j, q) for q in range(d + 1)]
        X = np.zeros_like(R)
        for e in range(d, -1, -1):
            acc = R[e].copy()
            for q in range(1, d - e + 1):
                acc -= math.comb(e + q, q) * np.einsum("ab,pb->pa", Bd[q], X[e + q])
            X[e] = np.linalg.solve(Bd[0], acc.T).T
        return ZPoly(X)

    if jd is None or not jd.complete:
        raise UnresolvedIndexError(f"singular point j = {j} has no complete set of Jordan chains")
    if registry is None:
        raise ValueError("a parameter registry is required at singular points")
    pmax = max(jd.lengths)
    P1 = R.shape[1]
    for D in (d + pmax, d + pmax + 1):
        Bd = [B_deriv(op, j, q) for q in range(D + 1)]
        A = _operator_matrix(Bd, D)
        b = np.zeros(((D + 1) * m, P1))
        b[: (d + 1) * m] = R.transpose(0, 2, 1).reshape((d + 1) * m, P1)
        U, S, Vh = np.linalg.svd(A)
        keep = S > tol * max(S[0], scale)
        x = Vh[keep].T @ ((U[:, keep].T @ b) / S[keep, None])
        res = np.abs(A @ x - b).max() if b.size else 0.0
        if res <= tol * max(1.0, np.abs(b).max(), scale * np.abs(x).max()):
            break
    else:
        raise ExpansionError(f"coefficient equation at j = {j} is inconsistent (residual {res:.3g}); "
                             "the singular point may be misclassified")
    X = x.reshape(D + 1, m, P1).transpose(0, 2, 1)
    X = _trim(X, 1e-13 * max(1.0, float(np.abs(X).max())))

    top = max(X.shape[0] - 1, pmax - 1)
    new = []
    for c, (chi, p) in enumerate(zip(jd.keldysh, jd.lengths), start=1):
        for l in range(p):
            col = registry.add(j, c, l)
            Y = np.zeros((top + 1, m))
            for r in range(l + 1):
                Y[l - r] = chi[r] / math.factorial(l - r)
            new.append((col, Y))
    X = _pad(X, top, len(registry))
    for col, Y in new:
        X[:, col] = Y
    return ZPoly(X)


# ---------------------------------------------------------------------------
# exact-kernel residual


def apply_F(p: Problem, x: Callable[[np.ndarray], np.ndarray], t) -> tuple[np.ndarray, np.ndarray]:
    """F(x)(t) with the exact data, and the sum of term magnitudes (a roundoff scale).

    The integral over the piece adjacent to s = 0 uses a rule exact enough
    for integrands with logarithmic behaviour at 0; the other pieces use
    composite Gauss-Legendre.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    Kd = p.diag_kernel(t)
    xt = x(t)
    v = np.einsum("kab,kb->ka", Kd, xt)
    S = np.linalg.norm(v, axis=-1)
    for i in range(1, p.n):
        a = p.alpha(i, t)
        term = p.alpha_prime(i, t)[:, None] * np.einsum("kab,kb->ka", p.jump(i, t), x(a))
        v += term
        S += np.linalg.norm(term, axis=-1)
    for i in range(1, p.n + 1):
        if p.pieces[i - 1].dt_is_zero:
            continue
        hi = p.alpha(i, t)
        if i == 1:
            s, w = _quad.log_endpoint_rule(hi)
        else:
            s, w = _quad.gauss_rule(p.alpha(i - 1, t), hi)
        G = p.piece_dt(i, t[:, None], s)
        integrand = np.einsum("kqab,kqb->kqa", G, x(s)) * w[..., None]
        v += integrand.sum(axis=1)
        S += np.linalg.norm(integrand, axis=-1).sum(axis=1)
    fp = p.rhs_prime(t)
    v -= fp
    S += np.linalg.norm(fp, axis=-1)
    return v, S


def loglog_slope(t, y, floor=None, decades: float | None = None) -> float:
    """Least-squares slope of log y against log t over the points above ``floor``.

    Points at or below the floor carry no information on the decay rate; if
    fewer than three remain the function is below measurement everywhere and
    the slope is reported as +inf.  With ``decades`` set, only measurable
    points within that many decades of the smallest one are fitted, which
    keeps sign changes of higher-order terms at larger t out of the estimate.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = y > (0.0 if floor is None else np.asarray(floor, dtype=float))
    if mask.sum() < 3:
        return math.inf
    if decades is not None:
        t0 = t[mask].min()
        near = mask & (t <= t0 * 10.0**decades)
        if near.sum() >= 3:
            mask = near
    return float(np.polyfit(np.log(t[mask]), np.log(y[mask]), 1)[0])


def residual_slope(p: Problem, xhat: LogPowerExpansion, assignment=None, window=(1e-6, 1e-2),
                   points: int = 49, decades: float = 1.0) -> tuple[float, dict]:
    t = np.geomspace(window[0], window[1], points)
    F, S = apply_F(p, lambda s: eval_expansion(xhat, s, assignment), t)
    y = np.linalg.norm(F, axis=-1)
    floor = FLOOR_FACTOR * S
    slope = loglog_slope(t, y, floor, decades)
    return slope, {"t": t.tolist(), "residual": y.tolist(), "floor": floor.tolist(),
                   "above_floor": int(np.sum(y > floor)), "slope": slope}


# ---------------------------------------------------------------------------
# driver


def build_expansion(p: Problem, N: int, tol_rank: float | None = None, check: bool = True,
                    window=(1e-6, 1e-2)) -> LogPowerExpansion:
    """Coefficients x_0..x_N so that F(xhat) = o(t^N)."""
    op = build_charop(p)
    kw = {} if tol_rank is None else {"tol_rank": tol_rank}
    sr: ScanResult = scan(op, N, **kw)
    for pt in sr.singular:
        jd = sr.jordan.get(pt.j)
        if jd is None or not jd.complete:
            why = jd.detail if jd is not None else pt.detail
            raise UnresolvedIndexError(f"j = {pt.j}: {why or 'index unresolved'}")
    td = taylor_data(p, N)
    registry = ParamRegistry()
    Xs: list[np.ndarray] = []
    for J in range(N + 1):
        R = _residual_arrays(td, p.n, Xs, J)
        X = solve_coefficient(op, J, sr.points[J], ZPoly(-R[J]), sr.jordan.get(J), registry).coeffs
        Xs.append(X)
        Xs = [_pad(Y, None, len(registry)) for Y in Xs]

    R = _residual_arrays(td, p.n, Xs, N)
    ref = max(1.0, float(np.abs(td.f).max()))
    series_res = float(np.abs(R).max()) / ref
    expected = sr.parameter_count()
    if len(registry) != expected:
        raise ExpansionError(f"registered {len(registry)} parameters, chain data predicts {expected}")
    xhat = LogPowerExpansion([ZPoly(X) for X in Xs], N, registry, p.m,
                             {"scan": sr.to_dict(), "series_residual": series_res})
    if series_res > 1e-8:
        raise ExpansionError(f"truncated residual does not vanish through t^{N} (max {series_res:.3g})")
    if check:
        zero = {pid: 0.0 for pid in registry.ids}
        slope, info = residual_slope(p, xhat, zero, window)
        xhat.diagnostics["residual_slope"] = info
        if not slope > N:
            raise ExpansionError(f"residual decays like t^{slope:.3f}, expected faster than t^{N}")
    return xhat
