"""Characteristic matrix family B(j) and classification of its singular points.

For the log-power ansatz x(t) ~ x_j(ln t) t^j the leading-order coefficient
equation involves the matrix family

    B(j) = K_n(0,0) + sum_i beta_i^(1+j) (K_i(0,0) - K_{i+1}(0,0)),   beta_i = alpha_i'(0),

and its j-derivatives B^(k)(j) = sum_i beta_i^(1+j) a_i^k Delta_i with
a_i = ln beta_i.  A value j is regular when B(j) is invertible; otherwise
its null space, index and Jordan chains decide how many free parameters
the expansion acquires there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CharOpError
from .model import Problem

__all__ = [
    "CharOperator",
    "SingularPointInfo",
    "JordanData",
    "ScanResult",
    "build_charop",
    "B",
    "B_deriv",
    "classify_point",
    "scan",
    "jordan_chains",
    "TOL_RANK",
    "K_MAX",
    "CHAIN_CAP",
]

TOL_RANK = 1e-9
K_MAX = 8
CHAIN_CAP = 8


@dataclass(frozen=True)
class CharOperator:
    K_n00: np.ndarray
    deltas: tuple[np.ndarray, ...]
    betas: np.ndarray
    a: np.ndarray

    @property
    def m(self) -> int:
        return self.K_n00.shape[0]

    @property
    def scale(self) -> float:
        """Size of the family; the reference for every rank and zero decision."""
        return float(np.linalg.norm(self.K_n00, 2) + sum(np.linalg.norm(d, 2) for d in self.deltas))

    def to_dict(self) -> dict:
        return {
            "K_n00": self.K_n00.tolist(),
            "deltas": [d.tolist() for d in self.deltas],
            "betas": self.betas.tolist(),
            "a": self.a.tolist(),
        }


def build_charop(p: Problem) -> CharOperator:
    """Evaluate K_i(0,0) and alpha_i'(0); requires 0 < alpha_i'(0) so that ln is defined."""
    K = [p.piece(i, 0.0, 0.0) for i in range(1, p.n + 1)]
    betas = np.array([float(p.alpha_prime(i, 0.0)) for i in range(1, p.n)])
    if np.any(betas <= 0):
        bad = [i + 1 for i, b in enumerate(betas) if b <= 0]
        raise CharOpError(f"alpha_i'(0) <= 0 for i = {bad}; ln alpha_i'(0) is undefined")
    deltas = tuple(K[i] - K[i + 1] for i in range(p.n - 1))
    return CharOperator(K[-1], deltas, betas, np.log(betas))


def B(op: CharOperator, j: float) -> np.ndarray:
    out = op.K_n00.astype(float).copy()
    for b, d in zip(op.betas, op.deltas):
        out += b ** (1.0 + j) * d
    return out


def B_deriv(op: CharOperator, j: float, k: int) -> np.ndarray:
    """k-th derivative of B with respect to j."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return B(op, j)
    out = np.zeros_like(op.K_n00, dtype=float)
    for b, a, d in zip(op.betas, op.a, op.deltas):
        out += b ** (1.0 + j) * a**k * d
    return out


def _deriv_tol(op: CharOperator, k: int, tol: float) -> float:
    amax = float(np.max(np.abs(op.a))) if len(op.a) else 0.0
    return tol * op.scale * max(1.0, amax) ** k


def _normalise_signs(V: np.ndarray) -> np.ndarray:
    """Flip columns so that each one's largest-magnitude entry is positive."""
    V = V.copy()
    for c in range(V.shape[1]):
        idx = int(np.argmax(np.abs(V[:, c])))
        if V[idx, c] < 0:
            V[:, c] = -V[:, c]
    return V


@dataclass
class SingularPointInfo:
    j: int
    kind: str  # "regular" | "singular"
    r: int
    index: int | None
    phi: np.ndarray
    psi: np.ndarray
    det_test: float | None
    singular_values: np.ndarray
    threshold: float
    detail: str = ""

    @property
    def is_singular(self) -> bool:
        return self.kind == "singular"

    @property
    def resolved(self) -> bool:
        return self.kind == "regular" or self.index is not None

    def to_dict(self) -> dict:
        return {
            "j": self.j,
            "kind": self.kind,
            "r": self.r,
            "index": self.index,
            "phi": self.phi.T.tolist(),
            "psi": self.psi.T.tolist(),
            "det_test": self.det_test,
            "singular_values": self.singular_values.tolist(),
            "rank_threshold": self.threshold,
            "detail": self.detail,
        }


def _null_bases(op: CharOperator, j: float, tol_rank: float):
    Bj = B(op, j)
    U, S, Vh = np.linalg.svd(Bj)
    thresh = tol_rank * max(float(S[0]) if len(S) else 0.0, op.scale)
    r = int(np.sum(S <= thresh))
    m = op.m
    phi = _normalise_signs(Vh[m - r :].T) if r else np.zeros((m, 0))
    psi = _normalise_signs(U[:, m - r :]) if r else np.zeros((m, 0))
    return S, thresh, r, phi, psi


def classify_point(op: CharOperator, j: int, tol_rank: float = TOL_RANK, k_max: int = K_MAX,
                   tol: float = 1e-8) -> SingularPointInfo:
    """Regular, or singular with index k: the first k with a nonsingular pairing
    matrix [<B^(k) phi_i, psi_l>] while B^(i) phi = 0 for all i < k."""
    if k_max < 1:
        raise ValueError("k_max must be at least 1")
    S, thresh, r, phi, psi = _null_bases(op, j, tol_rank)
    if r == 0:
        return SingularPointInfo(j, "regular", 0, None, phi, psi, None, S, thresh)
    for k in range(1, k_max + 1):
        Bk = B_deriv(op, j, k)
        pair = psi.T @ Bk @ phi
        tk = _deriv_tol(op, k, tol)
        if np.linalg.svd(pair, compute_uv=False).min() > tk:
            return SingularPointInfo(j, "singular", r, k, phi, psi, float(np.linalg.det(pair.T)), S, thresh)
        if np.linalg.norm(Bk @ phi, axis=0).max() > tk:
            return SingularPointInfo(
                j, "singular", r, None, phi, psi, float(np.linalg.det(pair.T)), S, thresh,
                f"null space not contained in N(B^({k})) and pairing matrix singular; index unresolved")
    return SingularPointInfo(j, "singular", r, None, phi, psi, 0.0, S, thresh,
                             f"no pairing determinant above tolerance for k <= {k_max}")


@dataclass
class JordanData:
    j: int
    eigenvectors: np.ndarray           # m x r, one column per chain
    chains: list[list[np.ndarray]]     # staircase-form vectors phi^(1..p)
    keldysh: list[list[np.ndarray]]    # chi_0..chi_{p-1}: sum_q B^(q)/q! chi_{l-q} = 0
    lengths: list[int]
    solvability_det: float
    chain_residual: float
    complete: bool
    psi: np.ndarray
    detail: str = ""

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def to_dict(self) -> dict:
        return {
            "j": self.j,
            "lengths": self.lengths,
            "chains": [[v.tolist() for v in ch] for ch in self.chains],
            "solvability_det": self.solvability_det,
            "chain_residual": self.chain_residual,
            "complete": self.complete,
            "detail": self.detail,
        }


def _toeplitz(Bq: list[np.ndarray], length: int) -> np.ndarray:
    m = Bq[0].shape[0]
    T = np.zeros((length * m, length * m))
    for r in range(length):
        for c in range(r + 1):
            T[r * m : (r + 1) * m, c * m : (c + 1) * m] = Bq[r - c]
    return T


def _orth(M: np.ndarray, thresh: float) -> np.ndarray:
    if M.size == 0:
        return np.zeros((M.shape[0], 0))
    U, S, _ = np.linalg.svd(M, full_matrices=False)
    return U[:, S > thresh]


def _chain_residual(Bd: list[np.ndarray], chain: list[np.ndarray]) -> float:
    """Max norm over e = p..1 of sum_l C(p+1-l, e) B^(p+1-l-e) phi^(l)."""
    p = len(chain)
    worst = 0.0
    for e in range(p, 0, -1):
        acc = np.zeros_like(chain[0])
        for l in range(1, p + 2 - e):
            n = p + 1 - l
            acc = acc + math.comb(n, e) * (Bd[n - e] @ chain[l - 1])
        worst = max(worst, float(np.linalg.norm(acc)))
    return worst


def jordan_chains(op: CharOperator, j_star: int, tol: float = 1e-10, cap: int = CHAIN_CAP,
                  tol_rank: float = TOL_RANK) -> JordanData:
    """Canonical system of Jordan chains of the family B at j_star.

    Chain lengths come from the nested subspaces S_l of eigenvectors that
    admit a chain of length >= l (first blocks of the kernels of the block
    Toeplitz matrices T_l).  Each chain is completed by a minimum-norm solve
    of the bordered staircase systems.
    """
    m = op.m
    Bd = [B_deriv(op, j_star, q) for q in range(cap + 2)]
    Bq = [Bd[q] / math.factorial(q) for q in range(cap + 2)]
    thresh = tol_rank * op.scale
    S, _, r, _, psi = _null_bases(op, j_star, tol_rank)
    if r == 0:
        raise CharOpError(f"j = {j_star} is a regular point; no Jordan chains")

    subspaces = []
    overflow = False
    for l in range(1, cap + 2):
        T = _toeplitz(Bq, l)
        _, s, Vh = np.linalg.svd(T)
        tl = thresh * max(1.0, l)
        ker = Vh[s <= tl].T if len(s) else np.zeros((l * m, 0))
        first = _orth(ker[:m], 1e-6) if ker.shape[1] else np.zeros((m, 0))
        if first.shape[1] == 0:
            break
        if l == cap + 1:
            overflow = True
            break
        subspaces.append(first)
    L = len(subspaces)

    chosen: list[np.ndarray] = []
    lengths: list[int] = []
    for l in range(L, 0, -1):
        Q = subspaces[l - 1]
        need = Q.shape[1] - len(chosen)
        if need <= 0:
            continue
        if chosen:
            C = np.column_stack(chosen)
            Q = Q - C @ np.linalg.lstsq(C, Q, rcond=None)[0]
        new = _normalise_signs(_orth(Q, 1e-6)[:, :need])
        for c in range(new.shape[1]):
            chosen.append(new[:, c])
            lengths.append(l)

    keldysh: list[list[np.ndarray]] = []
    chains: list[list[np.ndarray]] = []
    worst = 0.0
    for v, p in zip(chosen, lengths):
        chi = [v]
        if p > 1:
            # rows 1..p-1 of T_p with chi_0 = v moved to the right-hand side
            A = _toeplitz(Bq, p)[m:, m:]
            rhs = -np.concatenate([Bq[q] @ v for q in range(1, p)])
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
            chi += [sol[q * m : (q + 1) * m] for q in range(p - 1)]
        keldysh.append(chi)
        # scaled so that phi^(1) is the eigenvector itself
        stair = [chi[l - 1] * (math.factorial(p) / math.factorial(p + 1 - l)) for l in range(1, p + 1)]
        chains.append(stair)
        worst = max(worst, _chain_residual(Bd, stair))

    # v_i = sum_l B^(p+1-l) phi_i^(l); the set is complete iff [<v_i, psi_k>] is nonsingular
    ends = []
    for ch, p in zip(chains, lengths):
        ends.append(sum((Bd[p + 1 - l] @ ch[l - 1] for l in range(1, p + 1)), np.zeros(m)))
    Smat = np.array([[float(e @ psi[:, l]) for l in range(psi.shape[1])] for e in ends])
    det = float(np.linalg.det(Smat)) if Smat.size else 0.0
    sig = np.linalg.svd(Smat, compute_uv=False).min() if Smat.size else 0.0
    amax = float(np.max(np.abs(op.a))) if len(op.a) else 0.0
    complete = bool(len(chosen) == r and not overflow and sig > 1e-8 * op.scale * max(1.0, amax) ** max(lengths) * math.factorial(max(lengths)))
    detail = ""
    if overflow:
        detail = f"chain length exceeds the cap {cap}"
    elif not complete:
        detail = "solvability determinant vanishes; Jordan set incomplete"
    eig = np.column_stack(chosen) if chosen else np.zeros((m, 0))
    return JordanData(j_star, eig, chains, keldysh, lengths, det, worst, complete, psi, detail)


@dataclass
class ScanResult:
    points: list[SingularPointInfo]
    jordan: dict[int, JordanData] = field(default_factory=dict)

    @property
    def singular(self) -> list[SingularPointInfo]:
        return [pt for pt in self.points if pt.is_singular]

    @property
    def cond_C(self) -> bool:
        """Every point regular or a singular point of finite index."""
        return all(pt.resolved for pt in self.points)

    @property
    def cond_C1(self) -> bool:
        """Every singular point carries a complete Jordan set."""
        return all(pt.j in self.jordan and self.jordan[pt.j].complete for pt in self.singular)

    def parameter_count(self) -> int:
        return sum(self.jordan[pt.j].total if pt.j in self.jordan else pt.r * (pt.index or 0)
                   for pt in self.singular)

    def to_dict(self) -> dict:
        return {
            "points": [pt.to_dict() for pt in self.points],
            "jordan": {str(j): jd.to_dict() for j, jd in self.jordan.items()},
            "cond_C": self.cond_C,
            "cond_C1": self.cond_C1,
            "parameter_count": self.parameter_count(),
        }


def scan(op: CharOperator, N: int, tol_rank: float = TOL_RANK, k_max: int = K_MAX,
         chains: bool = True) -> ScanResult:
    """Classify j = 0..N; singular points also get their Jordan chains."""
    pts = [classify_point(op, j, tol_rank, k_max) for j in range(N + 1)]
    jd = {}
    if chains:
        for pt in pts:
            if pt.is_singular:
                jd[pt.j] = jordan_chains(op, pt.j, tol_rank=tol_rank)
    return ScanResult(pts, jd)
