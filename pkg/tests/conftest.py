from pathlib import Path

import pytest

from pwvolterra.model import load_problem, problem_from_dict

PROBLEMS = Path(__file__).resolve().parent.parent / "problems"


@pytest.fixture(scope="session")
def problems_dir() -> Path:
    return PROBLEMS


@pytest.fixture(scope="session")
def p1():
    return load_problem(PROBLEMS / "p1.json")


@pytest.fixture(scope="session")
def p2():
    return load_problem(PROBLEMS / "p2.json")


@pytest.fixture(scope="session")
def p3():
    return load_problem(PROBLEMS / "p3.json")


@pytest.fixture(scope="session")
def example1():
    return load_problem(PROBLEMS / "example1.json")


@pytest.fixture(scope="session")
def example3():
    return load_problem(PROBLEMS / "example3.json")


def scalar(alphas, kernels, f, T=1.0, **extra):
    """Scalar problem from plain strings."""
    d = {"m": 1, "n": len(kernels), "T": T, "alphas": list(alphas),
         "kernels": [[[k]] for k in kernels], "f": [f], **extra}
    return problem_from_dict(d)


# manufactured problem with exact solution x(t) = cos t
MANUFACTURED = {"m": 1, "n": 2, "T": 1.0, "alphas": ["t/2"], "kernels": [[["2+t"]], [["1"]]],
                "f": ["(1+t)*sin(t/2) + sin(t)"]}


# --- acceptance summary ------------------------------------------------------

import time

ACCEPTANCE: dict[int, str] = {}
_START = time.perf_counter()
SUITE_BUDGET = 180.0


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    elapsed = time.perf_counter() - _START
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
    ok = elapsed < SUITE_BUDGET
    terminalreporter.write_line(
        f"suite time: {'PASS' if ok else 'FAIL'}  {elapsed:.1f} s (budget {SUITE_BUDGET:.0f} s)")
