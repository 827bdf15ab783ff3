"""Scalar expression engine: parse, evaluate and differentiate.

Expressions are how problem files describe boundary curves, kernel entries
and right-hand sides.  The grammar is small and fixed (see
``docs/expr-grammar.md``); evaluation is IEEE double and works element-wise
on numpy arrays, so one parsed expression can be evaluated on a whole grid.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import EvalError, ParseError

__all__ = [
    "Expr",
    "Num",
    "Const",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "parse",
    "evaluate",
    "differentiate",
    "variables",
    "is_zero",
    "FUNCTIONS",
    "CONSTANTS",
]

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt", "abs")
CONSTANTS = {"pi": math.pi, "e": math.e}

Value = Union[float, np.ndarray]
Bindings = Mapping[str, Value]

# precedence levels used by the printer
_P_ADD, _P_MUL, _P_NEG, _P_POW, _P_ATOM = 1, 2, 3, 4, 5


class Expr:
    """Base class of the immutable expression tree."""

    __slots__ = ()
    prec = _P_ATOM

    def __call__(self, **bindings: Value) -> Value:
        return evaluate(self, bindings)

    def __str__(self) -> str:
        return _format(self)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float

    @property
    def prec(self):  # type: ignore[override]
        return _P_NEG if self.value < 0 or math.copysign(1.0, self.value) < 0 else _P_ATOM


@dataclass(frozen=True, eq=True)
class Const(Expr):
    name: str


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("variable name must be nonempty")


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    operand: Expr
    prec = _P_NEG


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def prec(self):  # type: ignore[override]
        return {"+": _P_ADD, "-": _P_ADD, "*": _P_MUL, "/": _P_MUL, "^": _P_POW}[self.op]


@dataclass(frozen=True, eq=True)
class Call(Expr):
    func: str
    arg: Expr


# ---------------------------------------------------------------------------
# lexer / parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while True:
            while pos < len(text) and text[pos].isspace():
                pos += 1
            if pos >= len(text):
                break
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                raise ParseError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
            kind = m.lastgroup
            self.tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.end = _byte_offset(text, len(text))
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def offset(self) -> int:
        tok = self.peek()
        return self.end if tok is None else _byte_offset(self.text, tok[2])

    def accept(self, value: str) -> bool:
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] == value:
            self.i += 1
            return True
        return False

    def expect(self, value: str) -> None:
        if not self.accept(value):
            tok = self.peek()
            found = "end of input" if tok is None else repr(tok[1])
            raise ParseError(f"expected {value!r}, found {found}", self.offset())

    def parse(self) -> Expr:
        node = self.expr()
        if self.peek() is not None:
            raise ParseError(f"expected operator or end of input, found {self.peek()[1]!r}", self.offset())
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            if self.accept("+"):
                node = BinOp("+", node, self.term())
            elif self.accept("-"):
                node = BinOp("-", node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.unary()
        while True:
            if self.accept("*"):
                node = BinOp("*", node, self.unary())
            elif self.accept("/"):
                node = BinOp("/", node, self.unary())
            else:
                return node

    def unary(self) -> Expr:
        if self.accept("-"):
            return Neg(self.unary())
        if self.accept("+"):
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.accept("^"):
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.peek()
        if tok is None:
            raise ParseError("expected expression, found end of input", self.end)
        kind, value, _ = tok
        if kind == "num":
            self.i += 1
            return Num(float(value))
        if kind == "ident":
            at = self.offset()
            self.i += 1
            if self.accept("("):
                if value not in FUNCTIONS:
                    raise ParseError(f"unknown function {value!r}", at)
                arg = self.expr()
                self.expect(")")
                return Call(value, arg)
            if value in FUNCTIONS:
                raise ParseError(f"function {value!r} needs an argument in parentheses", at)
            if value in CONSTANTS:
                return Const(value)
            return Var(value)
        if self.accept("("):
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(f"expected expression, found {value!r}", self.offset())


def parse(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Precedence from tightest: ``^`` (right-assoc), unary minus, ``* /``,
    ``+ -``.  Raises :class:`ParseError` carrying the byte offset.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", 0)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# evaluation


def _fail(msg: str, node: Expr):
    raise EvalError(f"{msg} in '{node}'")


def _eval(node: Expr, b: Bindings) -> Value:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return b[node.name]
        except KeyError:
            raise EvalError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Const):
        return CONSTANTS[node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, b)
    if isinstance(node, BinOp):
        x = _eval(node.left, b)
        y = _eval(node.right, b)
        op = node.op
        if op == "+":
            return x + y
        if op == "-":
            return x - y
        if op == "*":
            return x * y
        if op == "/":
            if np.any(np.asarray(y) == 0):
                _fail("division by zero", node)
            return np.divide(x, y)
        # power
        xa, ya = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if np.any((xa < 0) & (ya != np.round(ya))):
            _fail("negative base with non-integer exponent", node)
        if np.any((xa == 0) & (ya < 0)):
            _fail("zero to a negative power", node)
        with np.errstate(over="ignore"):
            return np.power(xa, ya) if (xa.ndim or ya.ndim) else float(np.power(xa, ya))
    if isinstance(node, Call):
        x = _eval(node.arg, b)
        f = node.func
        if f == "ln":
            if np.any(np.asarray(x) <= 0):
                _fail("logarithm of a nonpositive number", node)
            return np.log(x)
        if f == "sqrt":
            if np.any(np.asarray(x) < 0):
                _fail("square root of a negative number", node)
            return np.sqrt(x)
        if f == "sin":
            return np.sin(x)
        if f == "cos":
            return np.cos(x)
        if f == "abs":
            return np.abs(x)
        with np.errstate(over="ignore"):
            return np.exp(x)
    raise TypeError(f"not an expression node: {node!r}")


def evaluate(e: Expr, bindings: Bindings | None = None) -> Value:
    """Evaluate ``e`` with variables taken from ``bindings``.

    Bindings may be floats or numpy arrays (broadcast together).  Domain
    violations raise :class:`EvalError` instead of producing NaN.
    """
    out = _eval(e, bindings or {})
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    if isinstance(out, (int, np.floating)):
        return float(out)
    return out


def variables(e: Expr) -> frozenset[str]:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Neg):
        return variables(e.operand)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    if isinstance(e, Call):
        return variables(e.arg)
    return frozenset()


def is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


# ---------------------------------------------------------------------------
# constructors with constant folding


def _num(e: Expr) -> float | None:
    return e.value if isinstance(e, Num) else None


def _fold(op: str, a: float, b: float) -> Expr | None:
    try:
        if op == "+":
            v = a + b
        elif op == "-":
            v = a - b
        elif op == "*":
            v = a * b
        elif op == "/":
            v = a / b
        else:
            v = a**b
    except (ZeroDivisionError, OverflowError, ValueError):
        return None
    if isinstance(v, complex) or not math.isfinite(v):
        return None
    return Num(float(v))


def add(a: Expr, b: Expr) -> Expr:
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    if _num(a) is not None and _num(b) is not None:
        return _fold("+", a.value, b.value) or BinOp("+", a, b)
    if isinstance(b, Neg):
        return sub(a, b.operand)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if is_zero(b):
        return a
    if is_zero(a):
        return neg(b)
    if _num(a) is not None and _num(b) is not None:
        return _fold("-", a.value, b.value) or BinOp("-", a, b)
    return BinOp("-", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def mul(a: Expr, b: Expr) -> Expr:
    if is_zero(a) or is_zero(b):
        return Num(0.0)
    if _num(a) == 1.0:
        return b
    if _num(b) == 1.0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return _fold("*", a.value, b.value) or BinOp("*", a, b)
    if _num(a) == -1.0:
        return neg(b)
    if _num(b) == -1.0:
        return neg(a)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if is_zero(a):
        return Num(0.0)
    if _num(b) == 1.0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return _fold("/", a.value, b.value) or BinOp("/", a, b)
    return BinOp("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if is_zero(b):
        return Num(1.0)
    if _num(b) == 1.0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return _fold("^", a.value, b.value) or BinOp("^", a, b)
    return BinOp("^", a, b)


def call(f: str, a: Expr) -> Expr:
    if isinstance(a, Num):
        try:
            v = evaluate(Call(f, a))
            if math.isfinite(v):
                return Num(v)
        except EvalError:
            pass
    return Call(f, a)


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, var: str) -> Expr:
    """Exact symbolic derivative of ``e`` with respect to ``var``.

    Only constant folding is applied to the result.
    """
    d = lambda x: differentiate(x, var)  # noqa: E731
    if isinstance(e, (Num, Const)):
        return Num(0.0)
    if isinstance(e, Var):
        return Num(1.0 if e.name == var else 0.0)
    if isinstance(e, Neg):
        return neg(d(e.operand))
    if isinstance(e, BinOp):
        u, v = e.left, e.right
        if e.op == "+":
            return add(d(u), d(v))
        if e.op == "-":
            return sub(d(u), d(v))
        if e.op == "*":
            return add(mul(d(u), v), mul(u, d(v)))
        if e.op == "/":
            return div(sub(mul(d(u), v), mul(u, d(v))), power(v, Num(2.0)))
        # u^v
        dv = d(v)
        if is_zero(dv):
            return mul(mul(v, power(u, sub(v, Num(1.0)))), d(u))
        return mul(e, add(mul(dv, call("ln", u)), div(mul(v, d(u)), u)))
    if isinstance(e, Call):
        u = e.arg
        du = d(u)
        if is_zero(du):
            return Num(0.0)
        f = e.func
        if f == "sin":
            outer = call("cos", u)
        elif f == "cos":
            outer = neg(call("sin", u))
        elif f == "exp":
            outer = e
        elif f == "ln":
            return div(du, u)
        elif f == "sqrt":
            return div(du, mul(Num(2.0), e))
        else:  # abs
            outer = div(u, e)
        return mul(outer, du)
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# printing


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v)) if v != 0 or math.copysign(1.0, v) > 0 else "-0"
    return repr(v)


def _wrap(node: Expr, min_prec: int) -> str:
    s = _format(node)
    return f"({s})" if node.prec < min_prec else s


def _format(node: Expr) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, (Var, Const)):
        return node.name
    if isinstance(node, Neg):
        return "-" + _wrap(node.operand, _P_NEG)
    if isinstance(node, Call):
        return f"{node.func}({_format(node.arg)})"
    if isinstance(node, BinOp):
        p = node.prec
        if node.op == "^":
            return f"{_wrap(node.left, _P_ATOM)}^{_wrap(node.right, _P_NEG)}"
        # left-assoc: the right operand must bind strictly tighter
        return f"{_wrap(node.left, p)} {node.op} {_wrap(node.right, p + 1)}"
    raise TypeError(f"not an expression node: {node!r}")
