"""Closed-form coefficient expressions.

Small infix language used to write drifts, diffusions, drivers, costs and
terminal payoffs in problem files::

    expr  := sum
    sum   := prod (('+' | '-') prod)*
    prod  := unary (('*' | '/') unary)*
    unary := '-' unary | power
    power := atom ('^' unary)?          # right associative
    atom  := NUMBER | NAME | NAME '(' sum (',' sum)* ')' | '(' sum ')'

so ``-x1^2`` is ``-(x1^2)`` and ``2^-1`` is ``0.5``.

Trees are immutable and evaluate on floats or on numpy arrays (broadcast).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Mapping, Union

import numpy as np

Value = Union[float, np.ndarray]

FUNCTIONS = {"abs": 1, "exp": 1, "log": 1, "sqrt": 1, "sin": 1, "cos": 1, "max": -1, "min": -1}

_PREC_SUM, _PREC_PROD, _PREC_UNARY, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


class ExpressionSyntaxError(ValueError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at column {position + 1}")


class ExpressionEvalError(ArithmeticError):
    """Unbound variable or an argument outside a function's domain."""


class Expr:
    """Base class of expression tree nodes."""

    precedence = _PREC_ATOM

    @cached_property
    def free_vars(self) -> frozenset:
        return frozenset(self._vars())

    def _vars(self):
        return ()

    @cached_property
    def _compiled(self) -> Callable[[Mapping[str, Value]], Value]:
        return self._compile()

    def evaluate(self, bindings: Mapping[str, Value]) -> Value:
        missing = self.free_vars.difference(bindings)
        if missing:
            raise ExpressionEvalError(f"unbound variable(s): {', '.join(sorted(missing))}")
        return self._compiled(bindings)

    def __str__(self) -> str:
        return format_expression(self)


@dataclass(frozen=True, eq=True)
class Num(Expr):
    value: float

    def _compile(self):
        v = float(self.value)
        return lambda env: v


@dataclass(frozen=True, eq=True)
class Var(Expr):
    name: str

    def _vars(self):
        return (self.name,)

    def _compile(self):
        name = self.name
        return lambda env: env[name]


@dataclass(frozen=True, eq=True)
class Neg(Expr):
    operand: Expr
    precedence = _PREC_UNARY

    def _vars(self):
        return self.operand.free_vars

    def _compile(self):
        f = self.operand._compiled
        return lambda env: -f(env)


def _checked_div(a, b):
    if np.any(np.asarray(b) == 0):
        raise ExpressionEvalError("division by zero")
    return a / b


def _checked_pow(a, b):
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    bad = (a_arr < 0) & (b_arr != np.round(b_arr))
    if np.any(bad):
        raise ExpressionEvalError("negative base raised to a non-integer power")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise ExpressionEvalError("division by zero (zero to a negative power)")
    if a_arr.ndim == 0 and b_arr.ndim == 0:
        return float(a) ** float(b)
    return np.power(a_arr, b_arr)


_BINARY = {
    "+": (_PREC_SUM, lambda a, b: a + b),
    "-": (_PREC_SUM, lambda a, b: a - b),
    "*": (_PREC_PROD, lambda a, b: a * b),
    "/": (_PREC_PROD, _checked_div),
    "^": (_PREC_POW, _checked_pow),
}


@dataclass(frozen=True, eq=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def precedence(self):
        return _BINARY[self.op][0]

    def _vars(self):
        return self.left.free_vars | self.right.free_vars

    def _compile(self):
        fn = _BINARY[self.op][1]
        lf, rf = self.left._compiled, self.right._compiled
        return lambda env: fn(lf(env), rf(env))


def _log(a):
    if np.any(np.asarray(a) <= 0):
        raise ExpressionEvalError("log of a non-positive argument")
    return np.log(a) if isinstance(a, np.ndarray) else math.log(a)


def _sqrt(a):
    if np.any(np.asarray(a) < 0):
        raise ExpressionEvalError("sqrt of a negative argument")
    return np.sqrt(a) if isinstance(a, np.ndarray) else math.sqrt(a)


def _maximum(*args):
    out = args[0]
    for a in args[1:]:
        out = np.maximum(out, a)
    return out


def _minimum(*args):
    out = args[0]
    for a in args[1:]:
        out = np.minimum(out, a)
    return out


_CALLS = {
    "abs": np.abs,
    "exp": np.exp,
    "log": _log,
    "sqrt": _sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "max": _maximum,
    "min": _minimum,
}


@dataclass(frozen=True, eq=True)
class Call(Expr):
    name: str
    args: tuple

    def _vars(self):
        out = frozenset()
        for a in self.args:
            out |= a.free_vars
        return out

    def _compile(self):
        fn = _CALLS[self.name]
        fs = [a._compiled for a in self.args]

        def run(env):
            r = fn(*[f(env) for f in fs])
            return float(r) if np.ndim(r) == 0 else r

        return run


# --------------------------------------------------------------------------- lexer

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    pos, out = 0, []
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            col = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionSyntaxError(f"unexpected character {text[col]!r}", col, text)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", n))
    return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value or kind != "op":
            raise ExpressionSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", pos, self.text)

    def error(self, msg):
        raise ExpressionSyntaxError(msg, self.peek()[2], self.text)

    def parse(self) -> Expr:
        e = self.sum()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {val!r}", pos, self.text)
        return e

    def sum(self):
        e = self.prod()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.prod())
        return e

    def prod(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[0] == "op" and self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExpressionSyntaxError(f"unknown function {val!r}", pos, self.text)
                self.take()
                args = [self.sum()]
                while self.peek()[0] == "op" and self.peek()[1] == ",":
                    self.take()
                    args.append(self.sum())
                self.expect(")")
                arity = FUNCTIONS[val]
                if arity > 0 and len(args) != arity:
                    raise ExpressionSyntaxError(f"{val} takes {arity} argument(s), got {len(args)}", pos, self.text)
                if arity < 0 and len(args) < 2:
                    raise ExpressionSyntaxError(f"{val} takes at least 2 arguments", pos, self.text)
                return Call(val, tuple(args))
            if val in FUNCTIONS:
                raise ExpressionSyntaxError(f"function {val!r} used without arguments", pos, self.text)
            return Var(val)
        if kind == "op" and val == "(":
            e = self.sum()
            self.expect(")")
            return e
        raise ExpressionSyntaxError(f"unexpected {val or 'end of input'!r}", pos, self.text)


def parse_expression(text: str) -> Expr:
    """Parse infix text into an expression tree."""
    return _Parser(text).parse()


def _wrap(e: Expr, need: bool) -> str:
    s = format_expression(e)
    return f"({s})" if need else s


def format_expression(e: Expr) -> str:
    """Print with the minimal parentheses that re-parse to the same tree."""
    if isinstance(e, Num):
        s = repr(float(e.value))
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _wrap(e.operand, e.operand.precedence < _PREC_UNARY)
    if isinstance(e, Call):
        return f"{e.name}({', '.join(format_expression(a) for a in e.args)})"
    if isinstance(e, BinOp):
        p = e.precedence
        if e.op == "^":
            left = _wrap(e.left, e.left.precedence <= _PREC_POW)
            right = _wrap(e.right, e.right.precedence < _PREC_UNARY)
            return f"{left}^{right}"
        left = _wrap(e.left, e.left.precedence < p)
        right = _wrap(e.right, e.right.precedence <= p)
        return f"{left} {e.op} {right}"
    raise TypeError(f"not an expression node: {e!r}")


def eval_expression(e: Expr, bindings: Mapping[str, Value]) -> Value:
    return e.evaluate(bindings)
