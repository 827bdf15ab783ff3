import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from pwvolterra import expr as ex
from pwvolterra.errors import EvalError, ParseError


def ev(text, **b):
    return float(ex.evaluate(ex.parse(text), b))


class TestParse:
    def test_division(self):
        assert ex.parse("t/2") == ex.BinOp("/", ex.Var("t"), ex.Num(2.0))

    def test_precedence(self):
        e = ex.parse("2*t - s^2")
        assert e == ex.BinOp("-", ex.BinOp("*", ex.Num(2.0), ex.Var("t")),
                             ex.BinOp("^", ex.Var("s"), ex.Num(2.0)))

    def test_power_right_assoc(self):
        assert ev("2^3^2") == 512.0

    def test_unary_minus_below_power(self):
        assert ev("-2^2") == -4.0
        assert ev("2^-1") == 0.5

    def test_unbalanced_paren_offset(self):
        with pytest.raises(ParseError) as err:
            ex.parse("ln(")
        assert err.value.offset == 3

    def test_unknown_function(self):
        with pytest.raises(ParseError, match="unknown function"):
            ex.parse("tan(t)")

    def test_trailing_garbage(self):
        with pytest.raises(ParseError) as err:
            ex.parse("t t")
        assert err.value.offset == 2

    def test_offsets_are_bytes(self):
        with pytest.raises(ParseError) as err:
            ex.parse("t + é")
        assert err.value.offset == 4

    def test_empty(self):
        with pytest.raises(ParseError):
            ex.parse("   ")

    def test_bare_function_name(self):
        with pytest.raises(ParseError):
            ex.parse("sin + 1")


class TestEvaluate:
    def test_examples(self):
        assert ev("t/2", t=1) == 0.5
        assert ev("exp(0)*3") == 3.0
        assert ev("pi") == math.pi
        assert ev("e") == math.e

    @pytest.mark.parametrize("text,b", [("ln(t)", {"t": 0}), ("ln(t)", {"t": -1}), ("sqrt(t)", {"t": -1}),
                                        ("1/t", {"t": 0}), ("t^0.5", {"t": -2}), ("t^-1", {"t": 0})])
    def test_domain_errors(self, text, b):
        with pytest.raises(EvalError):
            ex.evaluate(ex.parse(text), b)

    def test_unbound(self):
        with pytest.raises(EvalError, match="unbound"):
            ex.evaluate(ex.parse("t + s"), {"t": 1})

    def test_vectorised(self):
        t = np.linspace(0.1, 1, 5)
        np.testing.assert_allclose(ex.evaluate(ex.parse("ln(t)*t"), {"t": t}), np.log(t) * t)

    def test_vector_domain_error(self):
        with pytest.raises(EvalError):
            ex.evaluate(ex.parse("ln(t)"), {"t": np.array([1.0, 0.0])})

    def test_negative_base_integer_power(self):
        assert ev("t^3", t=-2) == -8.0


class TestDifferentiate:
    def test_examples(self):
        assert float(ex.evaluate(ex.differentiate(ex.parse("t^2"), "t"), {"t": 3})) == 6.0
        d = ex.differentiate(ex.parse("sin(t*s)"), "t")
        assert float(ex.evaluate(d, {"t": 0, "s": 5})) == 5.0
        assert ex.is_zero(ex.differentiate(ex.parse("c"), "t"))

    def test_constant_folding(self):
        assert ex.is_zero(ex.differentiate(ex.parse("2*s + 3"), "t"))

    def test_general_power(self):
        d = ex.differentiate(ex.parse("t^t"), "t")
        assert float(ex.evaluate(d, {"t": 2.0})) == pytest.approx(4 * (math.log(2) + 1))


# --- property suites --------------------------------------------------------

_leaves = st.one_of(
    st.sampled_from(["t", "s", "pi"]),
    st.floats(min_value=-3, max_value=3, allow_nan=False).map(lambda v: f"{v:.3f}"),
)


def _extend(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda x: f"({x[0]} {x[1]} {x[2]})"),
        st.tuples(children, children).map(lambda x: f"({x[0]})/(2 + ({x[1]})^2)"),
        st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda x: f"{x[0]}({x[1]})"),
        children.map(lambda c: f"exp(sin({c}))"),
        children.map(lambda c: f"ln(1 + ({c})^2)"),
        children.map(lambda c: f"sqrt(1 + ({c})^2)"),
        st.tuples(children, st.integers(0, 3)).map(lambda x: f"({x[0]})^{x[1]}"),
        children.map(lambda c: f"-{c}"),
    )


expressions = st.recursive(_leaves, _extend, max_leaves=8)
points = st.tuples(st.floats(-1, 1), st.floats(-1, 1))


@settings(max_examples=150, deadline=None)
@given(expressions, points)
def test_derivative_matches_finite_differences(text, pt):
    e = ex.parse(text)
    d = ex.differentiate(e, "t")
    t, s = pt
    value = float(ex.evaluate(e, {"t": t, "s": s}))
    assume(math.isfinite(value) and abs(value) < 1e6)
    h = 1e-6
    fd = (float(ex.evaluate(e, {"t": t + h, "s": s})) - float(ex.evaluate(e, {"t": t - h, "s": s}))) / (2 * h)
    exact = float(ex.evaluate(d, {"t": t, "s": s}))
    scale = max(1.0, abs(exact), abs(value))
    assert abs(exact - fd) <= 1e-5 * scale


@settings(max_examples=100, deadline=None)
@given(expressions)
def test_print_reparse_preserves_values(text):
    e = ex.parse(text)
    again = ex.parse(str(e))
    rng = np.random.default_rng(0)
    t, s = rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100)
    np.testing.assert_allclose(ex.evaluate(again, {"t": t, "s": s}) + 0 * t,
                               ex.evaluate(e, {"t": t, "s": s}) + 0 * t, rtol=1e-12, atol=1e-12)
