import math

import pytest

from adnopt.modelir import (
    COMPONENTS,
    Expr,
    Fragment,
    LinearCon,
    Model,
    ModelError,
    ModelSyntaxError,
    ModelValidationError,
    QuadCon,
    QuadEqCon,
    SocCon,
    Var,
    canonicalize,
    diff_components,
    expr_equal,
    format_expr,
    format_number,
    models_equivalent,
    parse_fragment,
    parse_model,
    print_model,
    render_fragment,
)

from genmodels import random_model


def small_model():
    m = Model("demo", 2, 1.0)
    m.add_var(Var("x", "cont", 0.0, 10.0, tag="equipment"))
    m.add_var(Var("y", "cont"))
    m.add_var(Var("u", "bin", 0.0, 1.0))
    m.add_con(LinearCon("bal", "power_flow", Expr.term("x").add("y", -2.0), "=", 1.0))
    m.add_con(QuadCon("sq", "additional", Expr(quad={("x", "x"): 1.0}), Expr.term("y")))
    m.add_con(SocCon("cone", "convexification", [Expr.term("x"), Expr.term("y", 2.0)], Expr.term("y").add_const(1.0)))
    m.objective = Expr.term("x").add("y", 0.5)
    return m


class TestFormatting:
    def test_format_number_integers_print_bare(self):
        assert format_number(3.0) == "3"
        assert format_number(-12.0) == "-12"
        assert format_number(0.0) == "0"

    def test_format_number_infinities(self):
        assert format_number(math.inf) == "+inf"
        assert format_number(-math.inf) == "-inf"

    def test_format_number_is_exact(self):
        for x in (0.1, 1e-9, 123.456e7, -2.0 / 3.0):
            assert float(format_number(x)) == x

    def test_format_expr_orders_terms_deterministically(self):
        e = Expr.term("b").add("a", -1.0).add_quad("c", "a", 2.0).add_const(3.0)
        assert format_expr(e) == "-a + b + 2*a*c + 3"

    def test_empty_expr_prints_zero(self):
        assert format_expr(Expr()) == "0"


class TestExpr:
    def test_add_merges_coefficients(self):
        e = Expr.term("x").add("x", 2.0)
        assert e.linear == {"x": 3.0}

    def test_quad_key_is_order_free(self):
        e = Expr().add_quad("b", "a", 1.0).add_quad("a", "b", 1.0)
        assert e.quad == {("a", "b"): 2.0}

    def test_cleaned_drops_exact_zeros(self):
        e = Expr.term("x").add("x", -1.0).add_quad("y", "y", 0.0)
        assert e.cleaned().variables() == set()

    def test_value_evaluates_degree_two(self):
        e = Expr(constant=1.0).add("x", 2.0).add_quad("x", "y", 3.0)
        assert e.value({"x": 2.0, "y": -1.0}) == pytest.approx(1.0 + 4.0 - 6.0)

    def test_expr_equal_tolerance(self):
        a = Expr.term("x", 1.0)
        b = Expr.term("x", 1.0 + 5e-10)
        assert expr_equal(a, b, tol=1e-9)
        assert not expr_equal(a, b, tol=1e-11)


class TestRoundTrip:
    def test_print_then_parse_is_identity_on_the_demo_model(self):
        text = print_model(small_model())
        assert print_model(parse_model(text)) == text

    def test_seeded_random_models_round_trip(self):
        # the full 200-model sweep runs in the acceptance suite
        for seed in range(40):
            text = print_model(random_model(seed))
            assert print_model(parse_model(text)) == text, f"seed {seed}"

    def test_unit_coefficients_print_bare(self):
        text = print_model(small_model())
        assert "1*x" not in text
        assert "lin bal tag=power_flow: x - 2*y = 1" in text

    def test_parse_accepts_explicit_unit_coefficient(self):
        bare = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\n"
        explicit = bare.replace("min: x", "min: 1*x")
        assert print_model(parse_model(explicit)) == print_model(parse_model(bare))


class TestParseErrors:
    def test_missing_tag_is_rejected(self):
        text = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\nlin r: x <= 1\n"
        with pytest.raises(ModelError):
            parse_model(text)

    def test_duplicate_constraint_name_is_rejected(self):
        m = small_model()
        m.add_con(LinearCon("bal", "power_flow", Expr.term("x"), "<=", 5.0))
        with pytest.raises(ModelValidationError, match="not unique"):
            print_model(m)

    def test_undeclared_variable_is_rejected(self):
        text = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\nlin r tag=power_flow: ghost <= 1\n"
        with pytest.raises(ModelError, match="ghost"):
            parse_model(text)

    def test_unknown_component_tag_is_rejected(self):
        text = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\nlin r tag=mystery: x <= 1\n"
        with pytest.raises(ModelError):
            parse_model(text)

    def test_binary_bounds_outside_unit_interval_rejected(self):
        text = "problem p\nhorizon T=1 dt=1\nvar u kind=bin lb=0 ub=2\nmin: u\n"
        with pytest.raises(ModelError):
            parse_model(text)

    def test_syntax_error_reports_line_number(self):
        text = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\nwhat is this\n"
        with pytest.raises(ModelSyntaxError) as info:
            parse_model(text)
        assert info.value.line == 5

    def test_quadeq_has_no_place_in_a_model_script(self):
        text = "problem p\nhorizon T=1 dt=1\nvar x kind=cont lb=0 ub=1\nmin: x\nquadeq r tag=power_flow: x*x == x\n"
        with pytest.raises(ModelError):
            parse_model(text)


class TestFragments:
    def test_fragment_round_trip_with_quadeq(self):
        frag = Fragment()
        frag.variables.append(Var("l", "cont", 0.0, math.inf, tag="power_flow"))
        frag.variables.append(Var("v", "cont", 0.81, 1.21, tag="power_flow"))
        frag.variables.append(Var("P", "cont"))
        frag.constraints.append(
            QuadEqCon("cur", "power_flow", Expr(quad={("P", "P"): 1.0}), Expr(quad={("l", "v"): 1.0}))
        )
        text = render_fragment(frag)
        assert "quadeq" in text
        again = render_fragment(parse_fragment(text))
        assert again == text

    def test_fragment_allows_reference_to_variables_declared_elsewhere(self):
        # fragments are partial by design: rows may cite other rounds' vars
        frag = parse_fragment("lin r tag=additional: z_far_away <= 1\n")
        assert frag.constraints[0].expr.variables() == {"z_far_away"}

    def test_empty_fragment_renders_empty(self):
        assert render_fragment(Fragment()) == ""


class TestCanonicalize:
    def test_quad_row_becomes_a_cone(self):
        m = small_model()
        out = canonicalize(m)
        kinds = {c.name: c.kind for c in out.constraints}
        assert kinds["sq"] == "soc"
        assert all(c.kind in ("lin", "soc") for c in out.constraints)

    def test_lowered_cone_agrees_numerically(self):
        # x^2 <= y  <=>  norm(2x, y-1) <= y+1 must hold at the same points
        m = Model("q", 1, 1.0)
        m.add_var(Var("x"))
        m.add_var(Var("y"))
        m.add_con(QuadCon("sq", "additional", Expr(quad={("x", "x"): 1.0}), Expr.term("y")))
        m.objective = Expr.term("y")
        out = canonicalize(m)
        cone = next(c for c in out.constraints if c.kind == "soc")
        for x, y in ((0.0, 0.0), (2.0, 4.0), (1.5, 2.25), (3.0, 9.0)):
            point = {"x": x, "y": y}
            vec = math.hypot(*(e.value(point) for e in cone.vector))
            assert vec <= cone.bound.value(point) + 1e-12

    def test_quadratic_objective_gets_epigraph_variables(self):
        m = Model("qobj", 1, 1.0)
        m.add_var(Var("x", "cont", -1.0, 1.0))
        m.objective = Expr(quad={("x", "x"): 2.0}).add("x", 1.0)
        out = canonicalize(m)
        assert out.objective.is_affine
        epi = [name for name in out.variables if name.startswith("epi_")]
        assert epi
        assert any(c.kind == "soc" and c.name.startswith("obj.epi.") for c in out.constraints)

    def test_residual_quadeq_is_an_error(self):
        m = Model("raw", 1, 1.0)
        m.add_var(Var("x"))
        m.add_con(QuadEqCon("r", "power_flow", Expr(quad={("x", "x"): 1.0}), Expr.const(1.0)))
        with pytest.raises(ModelError):
            canonicalize(m)

    def test_nonconvex_quad_row_is_an_error(self):
        m = Model("bad", 1, 1.0)
        m.add_var(Var("x"))
        m.add_var(Var("y"))
        m.add_con(QuadCon("neg", "additional", Expr(quad={("x", "x"): -1.0}), Expr.term("y")))
        with pytest.raises(ModelError):
            canonicalize(m)

    def test_canonicalize_is_idempotent(self):
        once = canonicalize(small_model())
        assert print_model(canonicalize(once)) == print_model(once)


class TestDiff:
    def test_identical_models_match_on_every_component(self):
        m = canonicalize(small_model())
        diff = diff_components(m, m)
        assert set(diff) == set(COMPONENTS)
        assert all(d.status == "match" for d in diff.values())

    def test_dropped_component_reports_missing(self):
        ref = canonicalize(small_model())
        cand = ref.copy()
        cand.constraints = [c for c in cand.constraints if c.tag != "power_flow"]
        diff = diff_components(ref, cand)
        assert diff["power_flow"].status == "missing"

    def test_perturbed_coefficient_reports_partial(self):
        ref = canonicalize(small_model())
        cand = ref.copy()
        extra = LinearCon("bal2", "power_flow", Expr.term("x", 7.0), "=", 0.0)
        cand.add_con(extra)
        diff = diff_components(ref, cand)
        assert diff["power_flow"].status == "partial"
        assert diff["power_flow"].only_candidate == 1

    def test_equipment_axis_sees_tagged_variable_bounds(self):
        ref = canonicalize(small_model())
        cand = ref.copy()
        cand.variables = dict(cand.variables)
        cand.variables["x"] = Var("x", "cont", 0.0, 99.0, tag="equipment")
        diff = diff_components(ref, cand)
        assert diff["equipment"].status != "match"

    def test_models_equivalent_detects_objective_change(self):
        a = canonicalize(small_model())
        b = a.copy()
        assert models_equivalent(a, b)
        b.objective = Expr.term("y")
        assert not models_equivalent(a, b)
