import math

import numpy as np
import pytest

from symde.core.datagen import rastrigin_density
from symde.core.errors import ArityError, DimensionMismatch, ExpressionSyntaxError, UnknownSymbol
from symde.core.expr import (
    BINARY_OPS,
    Expression,
    Op,
    binary,
    complexity,
    const,
    evaluate,
    evaluate_batch,
    is_valid_constant,
    parse,
    parse_operators,
    random_expression,
    reindex,
    simplify,
    to_string,
    unary,
    var,
)

RASTRIGIN = (
    "(10 + 10 * square(x1) - 5 * cos(3 * 3.141592653589793 * x1 - 6.1)"
    " + 10 * square(x2) - 5 * cos(3 * 3.141592653589793 * x2 - 6.1)) / 586.67"
)


def test_parse_sum():
    e = parse("x1 + x2")
    assert e.root == binary(Op.ADD, var(1), var(2))
    assert complexity(e) == 3


def test_unary_minus_becomes_subtraction_from_zero():
    e = parse("exp(-(x1*x1))")
    assert e.root == unary(Op.EXP, binary(Op.SUB, const(0), binary(Op.MUL, var(1), var(1))))
    assert e.complexity == 6
    assert to_string(e) == "exp(0 - x1 * x1)"


def test_signed_literal_is_a_constant():
    assert parse("-2").root == const(-2.0)
    assert parse("x1 - -2").root == binary(Op.SUB, var(1), const(-2.0))


def test_rastrigin_coarse_model_round_trips():
    text = "1.1*(x1*x1 + x2*x2) + 1.1"
    e = parse(text)
    printed = to_string(e)
    assert printed == "1.1 * (x1 * x1 + x2 * x2) + 1.1"
    assert parse(printed) == e


@pytest.mark.parametrize(
    "expression, expected",
    [
        (Expression(binary(Op.ADD, var(1), const(1.0)), 1), "x1 + 1"),
        (Expression(unary(Op.POW2, var(2)), 2), "square(x2)"),
        (
            Expression(binary(Op.DIV, binary(Op.ADD, var(1), const(1)), binary(Op.SUB, var(2), const(2))), 2),
            "(x1 + 1) / (x2 - 2)",
        ),
        (Expression(binary(Op.SUB, var(1), binary(Op.SUB, var(2), var(3))), 3), "x1 - (x2 - x3)"),
        (Expression(binary(Op.SUB, binary(Op.SUB, var(1), var(2)), var(3)), 3), "x1 - x2 - x3"),
    ],
)
def test_canonical_printing(expression, expected):
    assert to_string(expression) == expected
    assert parse(expected, expression.var_count) == expression


def test_constants_print_shortest_exact_form():
    assert to_string(Expression(const(0.1), 1)) == "0.1"
    assert to_string(Expression(const(1e-05), 1)) == "1e-05"
    value = 0.1 + 0.2
    assert parse(to_string(Expression(const(value), 1))).root.value == value


def test_evaluate_examples():
    assert evaluate(parse("x1*x1 + 1"), [2.0]) == 5.0
    assert evaluate(parse("exp(0*x1)"), [123.4]) == 1.0


def test_rastrigin_at_origin_matches_hand_evaluation():
    expected = (10.0 - 10.0 * math.cos(6.1)) / 586.67
    assert evaluate(parse(RASTRIGIN, 2), [0.0, 0.0]) == pytest.approx(expected, rel=1e-14)


def test_rastrigin_expression_matches_ground_truth():
    axis = np.linspace(-2, 2, 100)
    points = np.stack([a.ravel() for a in np.meshgrid(axis, axis, indexing="ij")], axis=1)
    e = parse(RASTRIGIN, 2)
    batch = evaluate_batch(e, points)
    scalar = np.array([evaluate(e, p) for p in points])
    np.testing.assert_allclose(batch, scalar, rtol=1e-14, atol=0)
    np.testing.assert_allclose(batch, rastrigin_density(points), rtol=1e-12)


def test_batch_equals_scalar_loop_bitwise_for_arithmetic(rng):
    e = parse("(x1 * x2 - 3.5) / (x1 + 0.25) + square(x2) * cube(x1)")
    points = rng.normal(size=(500, 2))
    scalar = np.array([evaluate(e, p) for p in points])
    np.testing.assert_array_equal(evaluate_batch(e, points), scalar)


def test_constant_expression_over_batch():
    values = evaluate_batch(parse("2.5", 2), np.zeros((3, 2)))
    np.testing.assert_array_equal(values, [2.5, 2.5, 2.5])


def test_ieee_semantics_are_kept():
    values = evaluate_batch(parse("log(x1) + 1 / x2"), np.array([[-1.0, 1.0], [1.0, 0.0]]))
    assert np.isnan(values[0])
    assert np.isinf(values[1])


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        evaluate(parse("x1 + x2"), [1.0])
    with pytest.raises(DimensionMismatch):
        evaluate_batch(parse("x1"), np.zeros((4, 2)))


@pytest.mark.parametrize("text, offset", [("x1 +", 4), ("x1 + ) ", 5), ("(x1", 3), ("x1 $ x2", 3)])
def test_syntax_errors_carry_offsets(text, offset):
    with pytest.raises(ExpressionSyntaxError) as info:
        parse(text)
    assert info.value.offset == offset


def test_offsets_count_utf8_bytes():
    # the no-break space takes two bytes
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("x1 +\u00a0\u00e9")
    assert info.value.offset == 6
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("x1\u00a0+\u00a0)")
    assert info.value.offset == 7
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("\u00e9x")
    assert info.value.offset == 0


@pytest.mark.parametrize("text, offset", [("1e999", 0), ("x1 + 1e400", 5), ("x1 * -1e309", 6)])
def test_non_finite_literals_are_rejected(text, offset):
    with pytest.raises(ExpressionSyntaxError) as info:
        parse(text)
    assert info.value.offset == offset


def test_folding_never_creates_unprintable_constants():
    e = simplify(parse("1e200 * 1e200"))
    assert e.complexity == 3
    assert to_string(e) == "1e+200 * 1e+200"
    assert is_valid_constant(1e12)
    assert not is_valid_constant(1.7e308)
    assert not is_valid_constant(float("nan"))


def test_arity_and_symbol_errors():
    with pytest.raises(ArityError):
        parse("exp(x1, x2)")
    with pytest.raises(ArityError):
        parse("sin()")
    with pytest.raises(UnknownSymbol):
        parse("x3", var_count=2)
    with pytest.raises(UnknownSymbol):
        parse("tanh(x1)")
    with pytest.raises(UnknownSymbol):
        parse("y + 1")


@pytest.mark.parametrize("text, expected", [("x1 * 1 + 0", "x1"), ("2 + 3", "5"), ("exp(0 - 0)", "1")])
def test_simplify_examples(text, expected):
    assert to_string(simplify(parse(text))) == expected


def test_simplify_keeps_division_by_zero_unfolded():
    e = simplify(parse("x1 + 1 / 0"))
    assert e.complexity == 5


def test_random_expression_size_limits(rng):
    assert random_expression(3, 1, rng).root.is_leaf
    sizes = [random_expression(2, 50, rng).complexity for _ in range(2000)]
    assert max(sizes) <= 50


def test_random_expression_is_deterministic():
    first = random_expression(2, 30, np.random.default_rng(5))
    second = random_expression(2, 30, np.random.default_rng(5))
    assert first == second


def test_round_trip_over_random_expressions(rng):
    for _ in range(2000):
        e = random_expression(3, 40, rng)
        assert parse(to_string(e), 3) == e


def test_simplify_is_sound_and_never_grows(rng):
    operators = BINARY_OPS + (Op.EXP, Op.POW2, Op.POW3, Op.COS)
    points = rng.uniform(-3, 3, size=(100, 2))
    for _ in range(300):
        e = random_expression(2, 25, rng, operators)
        s = simplify(e)
        assert s.complexity <= e.complexity
        original = evaluate_batch(e, points)
        simplified = evaluate_batch(s, points)
        finite = np.isfinite(original) & np.isfinite(simplified)
        assert np.all(np.abs(simplified[finite] - original[finite]) <= 1e-12 * (1 + np.abs(original[finite])))


def test_reindex_moves_variables_into_the_global_space():
    e = reindex(parse("x1 * x2"), [3, 4], 4)
    assert to_string(e) == "x3 * x4"
    assert e.var_count == 4


def test_parse_operators():
    assert parse_operators("+, *, pow2, exp, +") == (Op.ADD, Op.MUL, Op.POW2, Op.EXP)
    with pytest.raises(UnknownSymbol):
        parse_operators("+,tanh")
