from __future__ import annotations

import random
from decimal import Decimal
from fractions import Fraction

import pytest

from finrag.calculator import (
    CalcError,
    DivisionByZeroError,
    ParseError,
    UnboundVariableError,
    calculate,
)


def test_constant_expression():
    assert calculate("2+2", {}, 0) == 4


def test_ratio_with_bindings():
    # (6.2 - 5.1)/5.1 = 1.1/5.1 = 0.21568627...
    assert calculate("(a - b)/b", {"a": 6.2, "b": 5.1}, 4) == 0.2157


def test_quick_ratio_style():
    assert calculate("(a+b)/c", {"a": 28.9, "b": 24.5, "c": 50.2}, 2) == 1.06


def test_surrounding_whitespace_ok():
    assert calculate("  2 + 2  ", {}, 0) == 4


def test_unicode_operators():
    assert calculate("6 × 7", {}, 0) == 42
    assert calculate("1 ÷ 4", {}, 2) == 0.25
    assert calculate("5 − 8", {}, 0) == -3


def test_unary_minus_and_parens():
    assert calculate("-(2 + 3) * -2", {}, 0) == 10
    assert calculate("--4", {}, 0) == 4


def test_half_even_rounding():
    assert calculate("1/8", {}, 2) == 0.12   # 0.125 rounds to even 0.12
    assert calculate("3/8", {}, 2) == 0.38   # 0.375 rounds to even 0.38
    assert calculate("-1/8", {}, 2) == -0.12


def test_division_by_zero():
    with pytest.raises(DivisionByZeroError):
        calculate("x/y", {"x": 1, "y": 0}, 2)


def test_unbound_variable_named():
    with pytest.raises(UnboundVariableError) as exc:
        calculate("a + missing", {"a": 1}, 2)
    assert "missing" in str(exc.value)


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as exc:
        calculate("2 + * 3", {}, 0)
    assert exc.value.position == 4


def test_garbage_rejected():
    for bad in ("", "2 +", "(1", "1 2", "a!b", "1.2.3"):
        with pytest.raises(CalcError):
            calculate(bad, {"a": 1, "b": 2}, 0)


# ---- randomized oracle ----
# Expressions are generated as trees and evaluated directly over Fractions,
# independently of the parser under test; the tree is then rendered to a
# string and fed to calculate().

_OPS = ("+", "-", "*", "/")


def _gen_tree(rng: random.Random, depth: int, names: list[str]):
    if depth <= 0 or rng.random() < 0.3:
        which = rng.random()
        if which < 0.45 and names:
            name = rng.choice(names)
            return ("var", name)
        if which < 0.8:
            return ("num", Fraction(rng.randint(0, 5000), 10 ** rng.randint(0, 2)))
        return ("neg", _gen_tree(rng, depth - 1, names))
    op = rng.choice(_OPS)
    return (op, _gen_tree(rng, depth - 1, names), _gen_tree(rng, depth - 1, names))


def _eval_tree(node, env) -> Fraction:
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -_eval_tree(node[1], env)
    a, b = _eval_tree(node[1], env), _eval_tree(node[2], env)
    if kind == "+":
        return a + b
    if kind == "-":
        return a - b
    if kind == "*":
        return a * b
    if b == 0:
        raise ZeroDivisionError
    return a / b


def _render(node, pretty_ops: bool) -> str:
    kind = node[0]
    if kind == "num":
        f: Fraction = node[1]
        if f.denominator == 1:
            return str(f.numerator)
        return str(Decimal(f.numerator) / Decimal(f.denominator))
    if kind == "var":
        return node[1]
    if kind == "neg":
        return "-(" + _render(node[1], pretty_ops) + ")"
    op = node[0]
    if pretty_ops:
        op = {"+": "+", "-": "−", "*": "×", "/": "÷"}[op]
    return "(" + _render(node[1], pretty_ops) + " " + op + " " + _render(node[2], pretty_ops) + ")"


def _round_half_even(value: Fraction, ndigits: int) -> float:
    scale = 10 ** ndigits
    scaled = value * scale
    q, r = divmod(scaled.numerator, scaled.denominator)
    double = 2 * r
    if double > scaled.denominator or (double == scaled.denominator and q % 2):
        q += 1
    return float(Fraction(q, scale))


def test_random_expressions_match_big_rational_oracle():
    rng = random.Random(2024)
    names = ["a", "b", "c", "x", "y"]
    checked = 0
    while checked < 10_000:
        tree = _gen_tree(rng, rng.randint(1, 5), names)
        env = {n: Fraction(rng.randint(-900, 900), rng.choice([1, 10, 100])) for n in names}
        try:
            exact = _eval_tree(tree, env)
        except ZeroDivisionError:
            expr = _render(tree, pretty_ops=bool(checked % 2))
            with pytest.raises(DivisionByZeroError):
                calculate(expr, env, 3)
            checked += 1
            continue
        precision = rng.randint(0, 6)
        expr = _render(tree, pretty_ops=bool(checked % 2))
        got = calculate(expr, env, precision)
        assert got == _round_half_even(exact, precision), expr
        checked += 1
