import json

import pytest

from adnopt.cases import load_case
from adnopt.formulator import (
    FormulationError,
    assemble,
    build_additional,
    build_equipment,
    build_objective,
    build_power_flow,
    convexify,
    formulate,
    make_context,
)
from adnopt.modelir import canonicalize, print_model

from conftest import case_variant, make_reqs

TRIO = {
    "district": "trio",
    "horizon": {"T": 3, "dt_hours": 1.0},
    "buses": [
        {"id": 0, "p_load": 0.0, "q_load": 0.0},
        {"id": 1, "p_load": [0.2, 0.3, 0.25], "q_load": 0.08},
        {"id": 2, "p_load": 0.15, "q_load": 0.05},
    ],
    "branches": [
        {"from": 0, "to": 1, "r": 0.02, "x": 0.04},
        {"from": 1, "to": 2, "r": 0.03, "x": 0.03},
    ],
    "devices": [
        {"kind": "dg", "bus": 1, "p_min": 0.0, "p_max": 0.4, "q_min": -0.2,
         "q_max": 0.2, "r_max": 0.1, "p_init": 0.05},
        {"kind": "bess", "bus": 2, "p_dis_max": 0.1, "p_cha_max": 0.1,
         "soc_min": 0.2, "soc_max": 0.9, "soc_init": 0.5, "eta": 0.9, "e_cap": 0.5},
        {"kind": "pv", "bus": 2, "s_max": 0.2, "p_avail": [0.0, 0.1, 0.15],
         "curtailable": True},
        {"kind": "svc", "bus": 1, "q_max": 0.1},
    ],
    "prices": {"rho0": [0.5, 0.9, 0.7], "rho_dg": 0.6, "rho_bess_dis": 0.1,
               "rho_bess_cha": 0.02},
    "limits": {"v_min": 0.95, "v_max": 1.05, "s_branch_max": 1.0},
}


def trio_case(**device_tweaks):
    doc = json.loads(json.dumps(TRIO))
    for kind, fields in device_tweaks.items():
        for dev in doc["devices"]:
            if dev["kind"] == kind:
                if fields is None:
                    doc["devices"].remove(dev)
                else:
                    dev.update(fields)
    return load_case(json.dumps(doc))


def full_reqs(**kw):
    kw.setdefault("district", "trio")
    kw.setdefault("equipment", ("dg", "bess", "pv", "svc"))
    return make_reqs(**kw)


def names(cons):
    return [c.name for c in cons]


class TestObjective:
    def test_min_cost_prices_every_import_and_device_step(self):
        ctx = make_context(full_reqs(objective="min_cost"), trio_case())
        frag = build_objective(ctx)
        obj = frag.objective
        assert obj.linear["P_grid_0"] == 0.5
        assert obj.linear["P_grid_1"] == 0.9
        assert obj.linear["P_dg_1_2"] == 0.6
        assert obj.linear["P_dis_2_0"] == 0.1
        assert obj.linear["P_cha_2_0"] == 0.02

    def test_min_loss_weights_squared_current_by_resistance(self):
        ctx = make_context(full_reqs(), trio_case())
        obj = build_objective(ctx).objective
        assert obj.linear["l_0_1_0"] == 0.02
        assert obj.linear["l_1_2_2"] == 0.03
        assert not obj.quad

    def test_min_voltage_deviation_is_quadratic_in_v(self):
        ctx = make_context(full_reqs(objective="min_voltage_deviation"), trio_case())
        obj = build_objective(ctx).objective
        assert obj.quad[("v_1_0", "v_1_0")] == 1.0
        assert obj.linear["v_1_0"] == -2.0
        assert obj.constant == 9.0  # 3 buses x 3 steps x (v-1)^2 expansion

    def test_eliminate_objectives_record_an_intent(self):
        ctx = make_context(
            full_reqs(objective="eliminate_voltage_violation", t_hat=1), trio_case()
        )
        frag = build_objective(ctx)
        assert frag.objective.is_constant
        assert ctx.intent is not None
        assert ctx.intent.kind == "voltage_deviation"
        assert ctx.intent.t_hat == 1

    def test_snapshot_context_projects_the_case(self):
        ctx = make_context(
            full_reqs(objective="eliminate_branch_violation", t_hat=2), trio_case()
        )
        assert ctx.work_case.horizon.T == 1
        assert ctx.work_case.bus(1).p_load == (0.25,)

    def test_stage_order_is_enforced(self):
        ctx = make_context(full_reqs(), trio_case())
        with pytest.raises(FormulationError, match="objective"):
            build_equipment(ctx)


class TestEquipment:
    def test_dg_bound_declarations_count(self):
        ctx = make_context(full_reqs(equipment=("dg",)), trio_case())
        build_objective(ctx)
        frag = build_equipment(ctx)
        boxes = [v for v in frag.variables if v.tag == "equipment"]
        assert len(boxes) == 6  # P and Q per step, T=3
        p0 = next(v for v in boxes if v.name == "P_dg_1_0")
        assert (p0.lb, p0.ub) == (0.0, 0.4)

    def test_dg_ramp_rows_with_and_without_anchor(self):
        ctx = make_context(full_reqs(equipment=("dg",)), trio_case())
        build_objective(ctx)
        ramp = [c for c in build_equipment(ctx).constraints if "ramp" in c.name]
        assert len(ramp) == 6  # anchored pair at t=0 plus pairs at t=1,2
        loose = make_context(full_reqs(equipment=("dg",)), _drop_p_init())
        build_objective(loose)
        ramp = [c for c in build_equipment(loose).constraints if "ramp" in c.name]
        assert len(ramp) == 4

    def test_bess_soc_chain_on_the_day_ahead_horizon(self):
        ctx = make_context(full_reqs(equipment=("bess",)), trio_case())
        build_objective(ctx)
        frag = build_equipment(ctx)
        got = names(frag.constraints)
        assert "bess.soc.init.2" in got
        assert "bess.soc.dyn.2.t1" in got and "bess.soc.dyn.2.t2" in got
        assert "bess.soc.final.2" in got
        dyn = next(c for c in frag.constraints if c.name == "bess.soc.dyn.2.t1")
        # dt/(eta*e_cap) discharge draw, eta*dt/e_cap charge credit
        assert dyn.expr.linear["P_dis_2_1"] == pytest.approx(1.0 / (0.9 * 0.5))
        assert dyn.expr.linear["P_cha_2_1"] == pytest.approx(-0.9 / 0.5)

    def test_bess_complementarity_is_bilinear_before_convexification(self):
        ctx = make_context(full_reqs(equipment=("bess",)), trio_case())
        build_objective(ctx)
        comp = [c for c in build_equipment(ctx).constraints if "comp" in c.name]
        assert len(comp) == 3
        assert all(c.kind == "quadeq" for c in comp)

    def test_snapshot_horizon_drops_temporal_rows(self):
        ctx = make_context(
            full_reqs(objective="eliminate_voltage_violation",
                      equipment=("dg", "bess"), t_hat=0),
            trio_case(),
        )
        build_objective(ctx)
        frag = build_equipment(ctx)
        got = names(frag.constraints)
        assert not any("ramp" in n or "soc" in n for n in got)
        assert "bess.comp.2.t0" in got  # complementarity is per-step physics

    def test_curtailable_pv_has_a_zero_floor(self):
        ctx = make_context(full_reqs(equipment=("pv",)), trio_case())
        build_objective(ctx)
        frag = build_equipment(ctx)
        p1 = next(v for v in frag.variables if v.name == "P_pv_2_1")
        assert (p1.lb, p1.ub) == (0.0, 0.1)

    def test_fixed_pv_pins_output_to_availability(self):
        ctx = make_context(
            full_reqs(equipment=("pv",)), trio_case(pv={"curtailable": False})
        )
        build_objective(ctx)
        frag = build_equipment(ctx)
        p1 = next(v for v in frag.variables if v.name == "P_pv_2_1")
        assert (p1.lb, p1.ub) == (0.1, 0.1)

    def test_unrequested_kinds_are_omitted_entirely(self):
        ctx = make_context(full_reqs(equipment=("svc",)), trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        build_power_flow(ctx)
        build_additional(ctx)
        model = assemble(ctx)
        assert not any(n.startswith(("P_dg", "P_dis", "P_pv")) for n in model.variables)
        assert "Q_svc_1_0" in model.variables


def _drop_p_init():
    doc = json.loads(json.dumps(TRIO))
    for dev in doc["devices"]:
        dev.pop("p_init", None)
    return load_case(json.dumps(doc))


class TestPowerFlow:
    def test_row_census_per_step(self):
        ctx = make_context(full_reqs(), trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        frag = build_power_flow(ctx)
        got = names(frag.constraints)
        for t in range(3):
            for bus in (0, 1, 2):
                assert f"pf.p.{bus}.t{t}" in got
                assert f"pf.q.{bus}.t{t}" in got
            for e in (0, 1):
                assert f"pf.volt.{e}.t{t}" in got
                assert f"pf.curr.{e}.t{t}" in got
            assert f"pf.root.t{t}" in got
        assert len(got) == 3 * (3 * 2 + 2 * 2 + 1)

    def test_voltage_drop_coefficients(self):
        ctx = make_context(full_reqs(), trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        frag = build_power_flow(ctx)
        drop = next(c for c in frag.constraints if c.name == "pf.volt.0.t0")
        e = drop.expr
        assert e.linear["v_1_0"] == 1.0
        assert e.linear["v_0_0"] == -1.0
        assert e.linear["P_0_1_0"] == pytest.approx(2 * 0.02)
        assert e.linear["Q_0_1_0"] == pytest.approx(2 * 0.04)
        assert e.linear["l_0_1_0"] == pytest.approx(-(0.02**2 + 0.04**2))

    def test_balance_nets_loss_at_the_receiving_bus(self):
        ctx = make_context(full_reqs(), trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        frag = build_power_flow(ctx)
        bal = next(c for c in frag.constraints if c.name == "pf.p.1.t0")
        e = bal.expr
        assert e.linear["P_0_1_0"] == 1.0
        assert e.linear["l_0_1_0"] == pytest.approx(-0.02)
        assert e.linear["P_1_2_0"] == -1.0
        assert e.linear["P_dg_1_0"] == 1.0
        assert bal.rhs == 0.2

    def test_head_import_enters_only_the_root_balance(self):
        ctx = make_context(full_reqs(), trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        frag = build_power_flow(ctx)
        for con in frag.constraints:
            if con.kind != "lin":
                continue
            if "P_grid_0" in con.expr.linear:
                assert con.name == "pf.p.0.t0"


class TestAdditionalAndConvexify:
    def build_full(self, reqs, case=None):
        ctx = make_context(reqs, case or trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        build_power_flow(ctx)
        build_additional(ctx)
        return ctx

    def test_voltage_safety_bounds_squared_magnitudes(self):
        ctx = self.build_full(full_reqs(constraints=("voltage_safety",)))
        rows = ctx.fragments["additional"].constraints
        lo = next(c for c in rows if c.name == "safe.v.lo.1.t0")
        hi = next(c for c in rows if c.name == "safe.v.hi.1.t0")
        assert lo.rhs == pytest.approx(0.95**2)
        assert hi.rhs == pytest.approx(1.05**2)
        assert len(rows) == 2 * 3 * 3

    def test_branch_safety_caps_apparent_power(self):
        ctx = self.build_full(full_reqs(constraints=("branch_safety",)))
        rows = ctx.fragments["additional"].constraints
        cap = next(c for c in rows if c.name == "safe.s.0.t0")
        assert cap.kind == "quad"
        assert cap.rhs.constant == pytest.approx(1.0)

    def test_no_constraints_requested_means_an_empty_fragment(self):
        ctx = self.build_full(full_reqs())
        assert ctx.fragments["additional"].constraints == []

    def test_assemble_names_the_problem_after_district_and_objective(self):
        model = assemble(self.build_full(full_reqs()))
        assert model.name == "trio_min_loss"
        snap = assemble(self.build_full(
            full_reqs(objective="eliminate_voltage_violation", t_hat=2)))
        assert snap.name == "trio_eliminate_voltage_violation_t2"

    def test_current_rows_become_cones(self):
        model = assemble(self.build_full(full_reqs()))
        out = convexify(model)
        cone = next(c for c in out.constraints if c.name == "pf.cone.0.t0")
        assert cone.kind == "soc"
        assert cone.tag == "convexification"
        parts = sorted(str(sorted(e.linear.items())) for e in cone.vector)
        assert parts == sorted([
            str(sorted({"P_0_1_0": 2.0}.items())),
            str(sorted({"Q_0_1_0": 2.0}.items())),
            str(sorted({"l_0_1_0": 1.0, "v_0_0": -1.0}.items())),
        ])
        assert cone.bound.linear == {"l_0_1_0": 1.0, "v_0_0": 1.0}
        assert not any(c.kind == "quadeq" for c in out.constraints)

    def test_complementarity_becomes_binary_links(self):
        model = assemble(self.build_full(full_reqs()))
        out = convexify(model)
        got = names(out.constraints)
        for t in range(3):
            assert f"bess.dis.bin.2.t{t}" in got
            assert f"bess.cha.bin.2.t{t}" in got
        assert out.variables["u_2_0"].kind == "bin"
        dis = next(c for c in out.constraints if c.name == "bess.dis.bin.2.t0")
        assert dis.expr.linear["u_2_0"] == pytest.approx(-0.1)

    def test_minmax_intent_becomes_epigraph_rows_under_z(self):
        model = assemble(self.build_full(
            full_reqs(objective="eliminate_voltage_violation",
                      equipment=("svc",), t_hat=1)))
        out = convexify(model)
        assert out.objective.linear == {"z": 1.0}
        assert out.minmax_intent is None
        epi = [c for c in out.constraints if c.name.startswith("cvx.epi.v.")]
        assert len(epi) == 3  # one per bus on the single step

    def test_branch_intent_uses_flow_epigraphs(self):
        model = assemble(self.build_full(
            full_reqs(objective="eliminate_branch_violation",
                      equipment=("pv",), t_hat=0)))
        out = convexify(model)
        epi = sorted(c.name for c in out.constraints if c.name.startswith("cvx.epi.s."))
        assert epi == ["cvx.epi.s.0_1.t0", "cvx.epi.s.1_2.t0"]

    def test_convexify_passes_through_convex_models(self):
        model = convexify(assemble(self.build_full(full_reqs(equipment=("svc",)))))
        again = convexify(model)
        assert print_model(canonicalize(again)) == print_model(canonicalize(model))


class TestFormulate:
    def test_formulate_matches_the_staged_pipeline(self):
        req = full_reqs(constraints=("voltage_safety",))
        ctx = make_context(req, trio_case())
        build_objective(ctx)
        build_equipment(ctx)
        build_power_flow(ctx)
        build_additional(ctx)
        staged = convexify(assemble(ctx))
        direct = formulate(req, trio_case())
        assert print_model(canonicalize(direct)) == print_model(canonicalize(staged))

    def test_every_formulation_is_printable(self):
        # spot check across the objective grid; the exhaustive sweep is an
        # acceptance criterion
        for objective in ("min_cost", "min_loss", "min_voltage_deviation"):
            model = formulate(full_reqs(objective=objective), trio_case())
            assert print_model(canonicalize(model))

    def test_bundled_fixture_formulates(self, campus):
        model = formulate(
            make_reqs(equipment=("pv", "svc"), constraints=("voltage_safety",)),
            campus,
        )
        assert model.name == "campus_min_loss"
        assert model.horizon_T == 4
