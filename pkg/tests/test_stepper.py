import math

import numpy as np
import pytest

from conftest import MANUFACTURED, scalar
from pwvolterra.conditions import check_condition_A, plan_steps
from pwvolterra.errors import ConvergenceError, PreconditionError
from pwvolterra.model import problem_from_dict
from pwvolterra.stepper import (GridSolution, SecondKindForm, assemble, block_norms, discrete_intervals,
                                residual_first_kind, solve, solve_initial)


def test_second_kind_coefficients(p1, p2):
    t = np.array([0.0, 0.3, 1.0])
    # P1: C = alpha' * K_2(t,t)^{-1} (K_1 - K_2) = 1/2, no integral part, fbar = 3/2
    np.testing.assert_allclose(SecondKindForm(p1).functional(t)[:, 0, 0, 0], 0.5)
    np.testing.assert_allclose(SecondKindForm(p1).rhs(t)[:, 0], 1.5)
    assert SecondKindForm(p1).kernel_is_zero
    np.testing.assert_allclose(SecondKindForm(p2).functional(t)[:, 0, 0, 0], -1.0)
    np.testing.assert_allclose(SecondKindForm(p2).rhs(t)[:, 0], -1.0)


def test_weighted_form_scales_coefficients(p1):
    t = np.array([0.5])
    w = SecondKindForm(p1, weight_power=2).functional(t)[0, 0, 0, 0]
    assert w == pytest.approx(0.5 * 0.25)


def test_p1_exact_solution(p1):
    sol = solve(p1, 513)
    assert np.max(np.abs(sol.values - 1.0)) <= 1e-6
    assert residual_first_kind(p1, sol) <= 1e-8


def _manufactured_error(M):
    p = problem_from_dict(MANUFACTURED)
    sol = solve(p, M)
    return float(np.max(np.abs(sol.values[:, 0] - np.cos(sol.nodes))))


def test_manufactured_second_order():
    errs = [_manufactured_error(M) for M in (65, 129, 257, 513)]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    assert all(1.7 <= q <= 2.3 for q in orders), (errs, orders)


def test_decoupled_system_matches_scalar(p1):
    d = {"m": 2, "n": 2, "T": 1.0, "alphas": ["t/2"],
         "kernels": [[["2", "0"], ["0", "2+t"]], [["1", "0"], ["0", "1"]]],
         "f": ["3*t/2", "(1+t)*sin(t/2) + sin(t)"]}
    p = problem_from_dict(d)
    sol = solve(p, 257)
    np.testing.assert_allclose(sol.values[:, 0], 1.0, atol=1e-8)
    ref = solve(problem_from_dict(MANUFACTURED), 257)
    np.testing.assert_allclose(sol.values[:, 1], ref.values[:, 0], atol=1e-10)


def test_residual_linear_in_perturbation(p1):
    nodes = np.linspace(0, 1, 257)
    base = GridSolution(nodes, np.ones(257))
    assert residual_first_kind(p1, base) <= 1e-12
    r1 = residual_first_kind(p1, GridSolution(nodes, np.ones(257) + 1e-3))
    r2 = residual_first_kind(p1, GridSolution(nodes, np.ones(257) + 2e-3))
    assert r2 == pytest.approx(2 * r1, rel=1e-6)
    # x = 0 leaves exactly f
    assert residual_first_kind(p1, GridSolution(nodes, np.zeros(257))) == pytest.approx(1.5)


def test_csv_round_trip(tmp_path, example1):
    sol = solve(example1, 129)
    text = sol.to_csv(tmp_path / "a.csv", comments={"problem": "example1"})
    back = GridSolution.from_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.nodes, sol.nodes)
    np.testing.assert_array_equal(back.values, sol.values)
    assert back.meta["problem"] == "example1"
    assert solve(example1, 129).to_csv(comments={"problem": "example1"}) == text


def test_bad_csv(tmp_path):
    (tmp_path / "b.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        GridSolution.from_csv(tmp_path / "b.csv")


def test_p2_refused(p2):
    with pytest.raises(PreconditionError):
        solve(p2, 65)


def test_p2_iteration_does_not_contract(p2):
    form = SecondKindForm(p2)
    nodes = np.linspace(0, 1, 65)
    with pytest.raises(ConvergenceError) as err:
        solve_initial(form, nodes, 64, max_iter=100)
    assert err.value.non_contractive


def test_intervals_respect_retarded_arguments(example1):
    form = SecondKindForm(example1)
    nodes = np.linspace(0, 1, 257)
    plan = plan_steps(example1, check_condition_A(example1))
    ivs = discrete_intervals(form, nodes, plan.h, plan.epsilon)
    assert ivs[0][0] == 0 and ivs[-1][1] == 256
    alpha = form.bounds(nodes)[:, 1]
    for s, e in ivs[1:]:
        assert np.all(alpha[s + 1 : e + 1] <= nodes[s] + 1e-12)


def test_block_norms_of_assembled_rows(p1):
    form = SecondKindForm(p1)
    nodes = np.linspace(0, 1, 17)
    A = assemble(form, nodes, np.arange(17))
    bn = block_norms(A, 1)
    # each row interpolates C = 1/2 at alpha(t): weights sum to 1/2
    np.testing.assert_allclose(np.asarray(A.sum(axis=1)).ravel(), 0.5)
    assert bn.shape == (17, 17)
