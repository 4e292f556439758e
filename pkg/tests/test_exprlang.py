import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linfvar.exprlang import (
    Ast,
    BinOp,
    Call,
    DomainEvalError,
    Neg,
    Num,
    ParseError,
    SingularityError,
    Var,
    eval_jet2,
    eval_value,
    parse,
    to_source,
)


class TestParse:
    def test_sum_of_squares(self):
        ast = parse("P11^2 + P12^2", (2, 1))
        assert ast.root == BinOp("+", BinOp("^", Var("P11"), Num(2.0)), BinOp("^", Var("P12"), Num(2.0)))

    def test_aronsson_expression_parses(self):
        ast = parse("abs(x1)^(4/3) - abs(x2)^(4/3)", (2, 1))
        assert ast.variables == {"x1", "x2"}

    def test_syntax_error_offset(self):
        with pytest.raises(ParseError) as err:
            parse("x1 + * 2", (2, 1))
        assert err.value.offset == 5

    def test_unknown_variable(self):
        with pytest.raises(ParseError, match="unknown variable"):
            parse("x1 + foo", (2, 1))

    def test_variable_out_of_range(self):
        with pytest.raises(ParseError, match="out of range"):
            parse("x3", (2, 1))
        with pytest.raises(ParseError, match="out of range"):
            parse("P21", (2, 1))

    def test_arity_mismatch(self):
        with pytest.raises(ParseError, match="argument"):
            parse("pow(x1)", (1, 1))
        with pytest.raises(ParseError, match="argument"):
            parse("abs(x1, x1)", (1, 1))

    def test_empty_rejected(self):
        with pytest.raises(ParseError):
            parse("   ", (1, 1))

    def test_precedence(self):
        # ^ binds tighter than unary minus, which binds tighter than *
        ast = parse("-x1^2", (1, 1))
        assert ast.root == Neg(BinOp("^", Var("x1"), Num(2.0)))
        assert eval_value(parse("2*3^2", (1, 1)), {}) == 18.0
        assert eval_value(parse("2 - 3 - 4", (1, 1)), {}) == -5.0
        assert eval_value(parse("12 / 2 / 3", (1, 1)), {}) == 2.0

    def test_power_left_associative(self):
        assert eval_value(parse("2^3^2", (1, 1)), {}) == 64.0  # (2^3)^2

    def test_signed_exponent(self):
        assert eval_value(parse("2^-2", (1, 1)), {}) == 0.25


# hypothesis strategy over canonical-form ASTs
_leaf = st.one_of(
    st.builds(Num, st.floats(min_value=0.0, max_value=9.0, allow_nan=False).map(lambda v: round(v, 3))),
    st.sampled_from([Var("x1"), Var("x2"), Var("u1"), Var("eta1"), Var("P11"), Var("P12")]),
)


def _node_strategy():
    return st.recursive(
        _leaf,
        lambda inner: st.one_of(
            st.builds(Neg, inner),
            st.builds(BinOp, st.sampled_from(["+", "-", "*", "/", "^"]), inner, inner),
            st.builds(lambda a: Call("abs", (a,)), inner),
            st.builds(lambda a: Call("sin", (a,)), inner),
            st.builds(lambda a, b: Call("pow", (a, b)), inner, inner),
        ),
        max_leaves=12,
    )


@settings(max_examples=120, deadline=None)
@given(_node_strategy())
def test_print_parse_round_trip(root):
    ast = Ast(root=root, n=2, N=1, variables=frozenset())
    assert parse(to_source(ast), (2, 1)).root == root


class TestJets:
    def test_polynomial_jet(self):
        d = eval_jet2(parse("x1^2*x2", (2, 1)), {"x1": 3.0, "x2": 2.0}, ["x1"])
        assert d.val == 18.0
        assert d.grad[0] == 12.0
        assert d.hess[0, 0] == 4.0

    def test_abs_power_jet(self):
        d = eval_jet2(parse("abs(x1)^(4/3)", (2, 1)), {"x1": 1.0}, ["x1"])
        assert d.val == pytest.approx(1.0, abs=1e-15)
        assert d.grad[0] == pytest.approx(4.0 / 3.0, abs=1e-14)
        assert d.hess[0, 0] == pytest.approx(4.0 / 9.0, abs=1e-14)

    def test_abs_kink_raises(self):
        with pytest.raises(SingularityError):
            eval_jet2(parse("abs(x1)", (1, 1)), {"x1": 0.0}, ["x1"])

    def test_fractional_power_branch_point(self):
        with pytest.raises(SingularityError):
            eval_jet2(parse("x1^(4/3)", (1, 1)), {"x1": 0.0}, ["x1"])

    def test_domain_errors(self):
        with pytest.raises(DomainEvalError):
            eval_value(parse("log(x1)", (1, 1)), {"x1": -1.0})
        with pytest.raises(DomainEvalError):
            eval_value(parse("1 / x1", (1, 1)), {"x1": 0.0})
        with pytest.raises(DomainEvalError):
            eval_value(parse("x1^(1/2)", (1, 1)), {"x1": -1.0})

    def test_nan_policy_poisons_entries(self):
        d = eval_jet2(parse("abs(x1)", (1, 1)), {"x1": np.array([1.0, 0.0, -2.0])},
                      ["x1"], on_singularity="nan")
        assert d.grad[0, 0] == 1.0 and d.grad[0, 2] == -1.0
        assert np.isnan(d.grad[0, 1])

    def test_integer_power_at_zero(self):
        d = eval_jet2(parse("x1^2", (1, 1)), {"x1": 0.0}, ["x1"])
        assert d.val == 0.0 and d.grad[0] == 0.0 and d.hess[0, 0] == 2.0

    def test_batch_matches_pointwise(self):
        ast = parse("sin(x1)*exp(x2) + x1^3/x2", (2, 1))
        xs = np.array([0.4, 1.1, -0.3])
        ys = np.array([1.0, 2.0, 0.5])
        batch = eval_jet2(ast, {"x1": xs, "x2": ys}, ["x1", "x2"])
        for m in range(3):
            single = eval_jet2(ast, {"x1": xs[m], "x2": ys[m]}, ["x1", "x2"])
            assert batch.val[m] == single.val
            assert np.array_equal(batch.grad[:, m], single.grad)
            assert np.array_equal(batch.hess[:, :, m], single.hess)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(min_value=-2.0, max_value=2.0, allow_nan=False),
    st.floats(min_value=0.3, max_value=2.0, allow_nan=False),
)
def test_product_rule_hessian(a, b):
    """hess(f*g) = f hess(g) + g hess(f) + grad(f) x grad(g) + grad(g) x grad(f)."""
    f = eval_jet2(parse("sin(x1) + x1^2*x2", (2, 1)), {"x1": a, "x2": b}, ["x1", "x2"])
    g = eval_jet2(parse("exp(x2) - x1*x2", (2, 1)), {"x1": a, "x2": b}, ["x1", "x2"])
    fg = eval_jet2(parse("(sin(x1) + x1^2*x2) * (exp(x2) - x1*x2)", (2, 1)),
                   {"x1": a, "x2": b}, ["x1", "x2"])
    outer = np.outer(f.grad, g.grad)
    expected = f.val * g.hess + g.val * f.hess + outer + outer.T
    assert np.allclose(fg.hess, expected, atol=1e-12, rtol=1e-12)
    assert np.array_equal(fg.hess, fg.hess.T)


def test_random_polynomials_match_finite_differences():
    """grad/hess of 100 random polynomial ASTs match central differences to 10 h^2 relative.

    h = 1e-3 keeps the FD hessian's roundoff floor (eps / h^2 ~ 1e-10) well
    below the 10 h^2 = 1e-5 budget.
    """
    rng = np.random.default_rng(42)
    h = 1e-3
    for _ in range(100):
        terms = []
        for _ in range(rng.integers(1, 5)):
            c = float(rng.uniform(-2, 2))
            e1, e2 = rng.integers(0, 4, size=2)
            terms.append(f"{c!r} * x1^{e1} * x2^{e2}")
        src = " + ".join(terms)
        ast = parse(src, (2, 1))
        x0, y0 = rng.uniform(0.5, 1.5, size=2)

        def f(x, y):
            return float(eval_value(ast, {"x1": x, "x2": y}))

        d = eval_jet2(ast, {"x1": x0, "x2": y0}, ["x1", "x2"])
        fd_dx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2 * h)
        fd_dxx = (f(x0 + h, y0) - 2 * f(x0, y0) + f(x0 - h, y0)) / h**2
        fd_dxy = (f(x0 + h, y0 + h) - f(x0 + h, y0 - h) - f(x0 - h, y0 + h) + f(x0 - h, y0 - h)) / (4 * h * h)
        scale = max(1.0, abs(d.val), abs(fd_dx), abs(fd_dxx), abs(fd_dxy))
        assert abs(d.grad[0] - fd_dx) <= 10 * h**2 * scale
        assert abs(d.hess[0, 0] - fd_dxx) <= 10 * h**2 * scale
        assert abs(d.hess[0, 1] - fd_dxy) <= 10 * h**2 * scale


def test_variable_exponent_uses_exp_log():
    d = eval_jet2(parse("x1^x2", (2, 1)), {"x1": 2.0, "x2": 3.0}, ["x1", "x2"])
    assert d.val == pytest.approx(8.0, rel=1e-14)
    assert d.grad[0] == pytest.approx(12.0, rel=1e-12)          # d/dx x^y = y x^(y-1)
    assert d.grad[1] == pytest.approx(8.0 * math.log(2.0), rel=1e-12)
