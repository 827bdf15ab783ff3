import math

import numpy as np
import pytest

from generators import engineered
from pwvolterra.asympt import FLOOR_FACTOR, LogPowerExpansion, build_expansion, loglog_slope
from pwvolterra.errors import RefineError
from pwvolterra.refine import (WeightedNorm, default_eps, full_solution, gamma_profile, iterate_u,
                               refine_grid, residual_gamma)
from pwvolterra.stepper import residual_first_kind

LN2 = math.log(2)


@pytest.fixture(scope="module")
def sing0():
    p, _ = engineered(np.random.default_rng(5), {0: 1})
    return p


def test_p1_correction_vanishes(p1):
    s = full_solution(p1, grid=257)
    assert s.N_star == 0
    np.testing.assert_allclose(s.u.values, 0.0, atol=1e-14)
    np.testing.assert_allclose(s.x.values, 1.0, atol=1e-14)


@pytest.mark.parametrize("d", [0.0, 3.0, -1.0])
def test_p2_family(p2, d):
    s = full_solution(p2, {"d": d}, grid=513)
    t = s.x.nodes
    np.testing.assert_allclose(s.x.values[:, 0], d - np.log(t) / LN2, atol=1e-12)
    assert residual_first_kind(p2, s.x, 128, 1e-6) <= 1e-6


def test_p2_members_differ_by_constant(p2):
    a = full_solution(p2, {"c1": 0.0}, grid=513)
    b = full_solution(p2, {"c1": 3.0}, grid=513)
    np.testing.assert_allclose(b.x.values - a.x.values, 3.0, atol=1e-9)


def test_truncated_expansion_flagged(p2):
    xhat = build_expansion(p2, 3)
    # keep only the constant term: F = -1, so gamma grows like 1/t
    arr = xhat.coeffs[0].coeffs[:1].copy()
    short = LogPowerExpansion([type(xhat.coeffs[0])(arr)], 0, xhat.registry, 1)
    gp = gamma_profile(p2, short, {"d": 0.0}, 1)
    assert gp["blowup"] and gp["slope"] == pytest.approx(-1.0, abs=0.05)
    assert not gamma_profile(p2, xhat, {"d": 0.0}, 1)["blowup"]
    with pytest.raises(RefineError, match="gamma grows"):
        full_solution(p2, {"d": 0.0}, grid=257, expansion=LogPowerExpansion(short.coeffs, 1, xhat.registry, 1))


def test_order_too_low(p3):
    with pytest.raises(RefineError, match="below N"):
        full_solution(p3, {"c1": 0, "c2": 0}, N=1, grid=257)


def test_correction_slope(sing0):
    xhat = build_expansion(sing0, 2)
    a = {"c1": 0.7}
    s = full_solution(sing0, a, grid=1025, expansion=xhat)
    assert xhat.N > s.N_star
    t = np.geomspace(1e-6, 1e-3, 20)
    xv = s(t)
    diff = np.linalg.norm(xv - xhat(t, a), axis=1)
    slope = loglog_slope(t, diff, FLOOR_FACTOR * np.linalg.norm(xv, axis=1))
    assert math.isfinite(slope) and slope >= s.N_star - 0.1


def test_gamma_bounded_near_zero(sing0):
    xhat = build_expansion(sing0, 3)
    s = full_solution(sing0, {"c1": 0.7}, grid=513, expansion=xhat)
    small = s.u.nodes < 1e-4
    # u = O(t^(N+1-N*)) near 0; roundoff must not leak in
    assert np.max(np.abs(s.u.values[small])) < 1e-6


def test_iteration_ratio_bound(example1):
    s = full_solution(example1, grid=513)
    it = s.reports["iteration"]
    q = it["q_L"] + it["q_K"]
    assert q < 1
    assert max(it["ratios"], default=0.0) <= q + 0.05


def test_family_is_affine(p3):
    def run(c1, c2):
        return full_solution(p3, {"c1": c1, "c2": c2}, grid=257).x.values
    np.testing.assert_allclose(run(1.0, -2.0), run(1.0, 0.0) + run(0.0, -2.0) - run(0.0, 0.0), atol=1e-10)


def test_weighted_norm():
    wn = WeightedNorm(2.0)
    t = np.array([0.0, 0.5, 1.0])
    assert wn(t, np.array([1.0, 1.0, 1.0])) == 1.0
    assert wn(t, np.array([0.0, 0.0, 3.0])) == pytest.approx(3 * math.exp(-2))
    # a constant lower-triangular operator gains the factor sum e^{-l (t_k - t_j)}
    bn = np.tril(np.full((3, 3), 0.1))
    assert wn.operator_bound(t, bn) == pytest.approx(0.1 * (1 + math.exp(-1) + math.exp(-2)))


def test_refine_grid():
    nodes, i = refine_grid(0.3, 1.0, 200, 1e-8)
    assert nodes[0] == 0.0 and nodes[1] == pytest.approx(1e-8) and nodes[i] == pytest.approx(0.3)
    assert np.all(np.diff(nodes) > 0) and nodes[-1] == pytest.approx(1.0)


def test_default_eps(p2):
    eps = default_eps(p2)
    assert 0 < eps < 1


def test_iterate_u_needs_origin(p2):
    xhat = build_expansion(p2, 1)
    with pytest.raises(ValueError):
        iterate_u(p2, xhat, {"d": 0}, 1, np.linspace(0.1, 1, 5))


def test_residual_gamma_positive_t(p2):
    xhat = build_expansion(p2, 1)
    with pytest.raises(ValueError):
        residual_gamma(p2, xhat, {"d": 0}, 1, np.array([0.0]))
