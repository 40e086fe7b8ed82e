"""Exact arithmetic tool for the writer agent.

Parses +, -, *, / (ASCII or the typographic −, ×, ÷), parentheses, unary
minus, numeric literals, and bound variable names into an expression tree,
evaluates it over exact rationals, and rounds half-to-even to the requested
number of decimals.
"""
from __future__ import annotations

import re
from decimal import Decimal
from fractions import Fraction
from typing import Mapping

__all__ = [
    "CalcError",
    "DivisionByZeroError",
    "ParseError",
    "UnboundVariableError",
    "calculate",
]


class CalcError(ValueError):
    pass


class ParseError(CalcError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnboundVariableError(CalcError):
    def __init__(self, name: str):
        super().__init__(f"unbound variable: {name}")
        self.name = name


class DivisionByZeroError(CalcError):
    def __init__(self) -> None:
        super().__init__("division by zero")


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[()+*/−×÷-]))"
)

_BINARY = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "/": "/", "÷": "/"}


def _tokenize(expr: str) -> list[tuple[str, str, int]]:
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while pos < len(expr):
        if not expr[pos:].strip():
            break
        m = _TOKEN_RE.match(expr, pos)
        if m is None:
            at = pos + len(expr[pos:]) - len(expr[pos:].lstrip())
            raise ParseError(f"unexpected character {expr[at]!r}", at)
        if m.group("num") is not None:
            tokens.append(("num", m.group("num"), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    return tokens


class _Parser:
    """Recursive descent over the token list; builds tuple-shaped AST nodes."""

    def __init__(self, expr: str):
        self.expr = expr
        self.tokens = _tokenize(expr)
        self.i = 0

    def _peek(self) -> tuple[str, str, int] | None:
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def _next(self) -> tuple[str, str, int] | None:
        tok = self._peek()
        if tok is not None:
            self.i += 1
        return tok

    def parse(self):
        node = self._expr()
        tok = self._peek()
        if tok is not None:
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def _expr(self):
        node = self._term()
        while True:
            tok = self._peek()
            if tok and tok[0] == "op" and _BINARY.get(tok[1]) in ("+", "-"):
                self._next()
                node = (_BINARY[tok[1]], node, self._term())
            else:
                return node

    def _term(self):
        node = self._factor()
        while True:
            tok = self._peek()
            if tok and tok[0] == "op" and _BINARY.get(tok[1]) in ("*", "/"):
                self._next()
                node = (_BINARY[tok[1]], node, self._factor())
            else:
                return node

    def _factor(self):
        tok = self._peek()
        if tok and tok[0] == "op" and tok[1] in ("-", "−"):
            self._next()
            return ("neg", self._factor())
        return self._primary()

    def _primary(self):
        tok = self._next()
        if tok is None:
            raise ParseError("unexpected end of expression", len(self.expr))
        kind, value, at = tok
        if kind == "num":
            return ("num", Fraction(Decimal(value)))
        if kind == "name":
            return ("var", value)
        if kind == "op" and value == "(":
            node = self._expr()
            closing = self._next()
            if closing is None or closing[1] != ")":
                where = closing[2] if closing else len(self.expr)
                raise ParseError("expected ')'", where)
            return node
        raise ParseError(f"unexpected token {value!r}", at)


def _to_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # read floats through their decimal repr: 6.2 means 62/10
        return Fraction(Decimal(repr(value)))
    if isinstance(value, (str, Decimal)):
        return Fraction(Decimal(value))
    raise CalcError(f"unsupported binding value type: {type(value).__name__}")


def _eval(node, env: Mapping[str, Fraction]) -> Fraction:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        name = node[1]
        if name not in env:
            raise UnboundVariableError(name)
        return env[name]
    if kind == "neg":
        return -_eval(node[1], env)
    a = _eval(node[1], env)
    b = _eval(node[2], env)
    if kind == "+":
        return a + b
    if kind == "-":
        return a - b
    if kind == "*":
        return a * b
    if b == 0:
        raise DivisionByZeroError()
    return a / b


def _round_half_even(value: Fraction, ndigits: int) -> Fraction:
    scale = 10 ** ndigits
    scaled = value * scale
    q, r = divmod(scaled.numerator, scaled.denominator)
    double = 2 * r
    if double > scaled.denominator or (double == scaled.denominator and q % 2):
        q += 1
    return Fraction(q, scale)


def calculate(expr: str, bindings: Mapping[str, object], precision: int) -> float:
    """Evaluate ``expr`` with ``bindings`` substituted, exactly, then round
    half-to-even to ``precision`` decimals.

    Raises ParseError (with position), UnboundVariableError, or
    DivisionByZeroError.
    """
    if precision < 0:
        raise CalcError("precision must be >= 0")
    tree = _Parser(expr).parse()
    env = {name: _to_fraction(v) for name, v in bindings.items()}
    return float(_round_half_even(_eval(tree, env), precision))
