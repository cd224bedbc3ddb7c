"""Deterministic construction of dispatch optimization models.

Given structured requirements and a network case, five staged operations
build the model piece by piece, mirroring how the problem decomposes:

1. ``build_objective``        objective expression (or min-max intent)
2. ``build_equipment``        device variables and coupling rows
3. ``build_power_flow``       branch-flow physics per step
4. ``build_additional``       requested safety constraints
5. ``assemble``               merge fragments into one model

``convexify`` then replaces every nonconvex row: the quadratic current
definition becomes its second-order-cone relaxation, battery complementarity
becomes a binary reformulation, and a min-max intent becomes an epigraph.
Identical inputs produce byte-identical printed models.

Variable names follow ``<symbol>_<bus or branch>_<t>`` (branch spelled
``from_to``), e.g. ``P_dg_3_12``, ``l_0_1_0``, ``v_5_2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .cases import BESS, DG, PV, ROOT_BUS, SVC, NetworkCase, snapshot_at
from .modelir import (
    Expr,
    Fragment,
    INF,
    LinearCon,
    MinMaxIntent,
    Model,
    QuadCon,
    QuadEqCon,
    SocCon,
    Var,
    validate_model,
)
from .requirements import SNAPSHOT_OBJECTIVES, StructuredRequirements


class FormulationError(ValueError):
    """Requirements/case mismatch or build operations applied out of order."""


# canonical variable factories; every fragment declares through these so
# duplicate declarations merge cleanly at assemble time
def _var_v(bus: int, t: int) -> Var:
    return Var(f"v_{bus}_{t}", "cont", 0.0, INF, "power_flow")


def _var_branch(sym: str, key: str, t: int) -> Var:
    lb = 0.0 if sym == "l" else -INF
    return Var(f"{sym}_{key}_{t}", "cont", lb, INF, "power_flow")


def _var_grid(sym: str, t: int) -> Var:
    return Var(f"{sym}_grid_{t}", "cont", -INF, INF, "power_flow")


@dataclass
class FormulationContext:
    """Carries the working case and the fragments built so far."""

    requirements: StructuredRequirements
    case: NetworkCase
    work_case: NetworkCase
    t_hat: int | None  # original step index when working on a snapshot
    fragments: dict[str, Fragment] = field(default_factory=dict)
    intent: MinMaxIntent | None = None

    @property
    def temporal(self) -> bool:
        """True when cross-step coupling rows belong in the model."""
        return self.t_hat is None


def make_context(req: StructuredRequirements, case: NetworkCase) -> FormulationContext:
    """Validate the pairing and snapshot the case for single-step work.

    Violation-elimination objectives always operate on one step; day-ahead
    objectives under a single-step horizon get the snapshot as well (temporal
    rows drop, everything else is unchanged).
    """
    problems: list[str] = []
    installed = {d.kind for d in case.devices}
    for kind in sorted(req.equipment - installed):
        problems.append(f"equipment {kind!r} is not installed in district {case.district!r}")
    t_hat: int | None = None
    if req.objective in SNAPSHOT_OBJECTIVES or req.horizon.kind == "single_timestep":
        t_hat = req.horizon.t_hat if req.horizon.kind == "single_timestep" else 0
        if t_hat >= case.horizon.T:
            problems.append(f"timestep {t_hat} outside the case horizon (T={case.horizon.T})")
    if problems:
        raise FormulationError("; ".join(problems))
    work = snapshot_at(case, t_hat) if t_hat is not None else case
    return FormulationContext(req, case, work, t_hat)


def _require_stage(ctx: FormulationContext, needed: tuple[str, ...], this: str) -> None:
    for stage in needed:
        if stage not in ctx.fragments:
            raise FormulationError(f"{this} requires {stage} to be built first")
    if this in ctx.fragments:
        raise FormulationError(f"{this} already built")


def _sorted_devices(ctx: FormulationContext, kind: str):
    if kind not in ctx.requirements.equipment:
        return []
    return sorted(ctx.work_case.devices_of(kind), key=lambda d: d.bus)


# ---------------------------------------------------------------------------
# stage 1: objective
# ---------------------------------------------------------------------------


def build_objective(ctx: FormulationContext) -> Fragment:
    """Objective over installed-and-requested equipment only.

    Cost sums import, generator and battery prices per step; loss sums
    resistive dissipation over branches; voltage deviation sums squared
    distance to nominal; the violation-elimination objectives record a
    min-max intent resolved at convexification.
    """
    _require_stage(ctx, (), "objective")
    case = ctx.work_case
    T = case.horizon.T
    frag = Fragment()
    req = ctx.requirements
    obj = Expr()
    if req.objective == "min_cost":
        for t in range(T):
            frag.variables.append(_var_grid("P", t))
            obj.add(f"P_grid_{t}", case.prices.rho0[t])
        for dev in _sorted_devices(ctx, "dg"):
            for t in range(T):
                frag.variables.append(_dg_var("P", dev, t))
                obj.add(f"P_dg_{dev.bus}_{t}", case.prices.rho_dg)
        for dev in _sorted_devices(ctx, "bess"):
            for t in range(T):
                frag.variables.append(_bess_var("P_dis", dev, t))
                frag.variables.append(_bess_var("P_cha", dev, t))
                obj.add(f"P_dis_{dev.bus}_{t}", case.prices.rho_bess_dis)
                obj.add(f"P_cha_{dev.bus}_{t}", case.prices.rho_bess_cha)
    elif req.objective == "min_loss":
        for t in range(T):
            for br in case.branches:
                frag.variables.append(_var_branch("l", br.key, t))
                obj.add(f"l_{br.key}_{t}", br.r)
    elif req.objective == "min_voltage_deviation":
        for t in range(T):
            for bus in case.bus_ids():
                name = f"v_{bus}_{t}"
                frag.variables.append(_var_v(bus, t))
                obj.add_quad(name, name, 1.0)
                obj.add(name, -2.0)
                obj.add_const(1.0)
    elif req.objective == "eliminate_voltage_violation":
        ctx.intent = MinMaxIntent("voltage_deviation", ctx.t_hat or 0)
    elif req.objective == "eliminate_branch_violation":
        ctx.intent = MinMaxIntent("branch_power", ctx.t_hat or 0)
    else:
        raise FormulationError(f"unknown objective {req.objective!r}")
    frag.objective = obj
    ctx.fragments["objective"] = frag
    return frag


# ---------------------------------------------------------------------------
# stage 2: equipment
# ---------------------------------------------------------------------------


def _dg_var(sym: str, dev: DG, t: int) -> Var:
    if sym == "P":
        return Var(f"P_dg_{dev.bus}_{t}", "cont", dev.p_min, dev.p_max, "equipment")
    return Var(f"Q_dg_{dev.bus}_{t}", "cont", dev.q_min, dev.q_max, "equipment")


def _bess_var(sym: str, dev: BESS, t: int) -> Var:
    if sym == "P_dis":
        return Var(f"P_dis_{dev.bus}_{t}", "cont", 0.0, dev.p_dis_max, "equipment")
    if sym == "P_cha":
        return Var(f"P_cha_{dev.bus}_{t}", "cont", 0.0, dev.p_cha_max, "equipment")
    return Var(f"SOC_{dev.bus}_{t}", "cont", dev.soc_min, dev.soc_max, "equipment")


def build_equipment(ctx: FormulationContext) -> Fragment:
    """Device boxes as tagged bounds plus the coupling rows.

    Generators get two-sided ramp rows per step (anchored at t=0 only when an
    initial output is given).  Batteries get bilinear complementarity per
    step, and on the day-ahead horizon the state-of-charge chain: dynamics
    with efficiency and capacity normalization, the initial pin, and the
    terminal-equals-initial row.  PV holds the availability profile in its
    active-power bounds and an inverter-disc row; static compensators are
    bound-only.
    """
    _require_stage(ctx, ("objective",), "equipment")
    case = ctx.work_case
    T = case.horizon.T
    dt = case.horizon.dt_hours
    frag = Fragment()

    for dev in _sorted_devices(ctx, "dg"):
        for t in range(T):
            frag.variables.append(_dg_var("P", dev, t))
            frag.variables.append(_dg_var("Q", dev, t))
        if ctx.temporal:
            for t in range(T):
                name = f"P_dg_{dev.bus}_{t}"
                if t == 0:
                    if dev.p_init is None:
                        continue
                    lo = Expr.term(name)
                    frag.constraints.append(
                        LinearCon(f"dg.ramp.lo.{dev.bus}.t0", "equipment", lo, ">=", dev.p_init - dev.r_max)
                    )
                    frag.constraints.append(
                        LinearCon(f"dg.ramp.hi.{dev.bus}.t0", "equipment", lo.copy(), "<=", dev.p_init + dev.r_max)
                    )
                else:
                    step = Expr.term(name).add(f"P_dg_{dev.bus}_{t-1}", -1.0)
                    frag.constraints.append(
                        LinearCon(f"dg.ramp.lo.{dev.bus}.t{t}", "equipment", step, ">=", -dev.r_max)
                    )
                    frag.constraints.append(
                        LinearCon(f"dg.ramp.hi.{dev.bus}.t{t}", "equipment", step.copy(), "<=", dev.r_max)
                    )

    for dev in _sorted_devices(ctx, "bess"):
        for t in range(T):
            frag.variables.append(_bess_var("P_dis", dev, t))
            frag.variables.append(_bess_var("P_cha", dev, t))
            comp = Expr(quad={(f"P_cha_{dev.bus}_{t}", f"P_dis_{dev.bus}_{t}"): 1.0})
            frag.constraints.append(
                QuadEqCon(f"bess.comp.{dev.bus}.t{t}", "equipment", comp, Expr.const(0.0))
            )
        if ctx.temporal:
            for t in range(T):
                frag.variables.append(_bess_var("SOC", dev, t))
            frag.constraints.append(
                LinearCon(
                    f"bess.soc.init.{dev.bus}", "equipment",
                    Expr.term(f"SOC_{dev.bus}_0"), "=", dev.soc_init,
                )
            )
            for t in range(1, T):
                dyn = Expr.term(f"SOC_{dev.bus}_{t}")
                dyn.add(f"SOC_{dev.bus}_{t-1}", -1.0)
                dyn.add(f"P_dis_{dev.bus}_{t}", dt / (dev.eta * dev.e_cap))
                dyn.add(f"P_cha_{dev.bus}_{t}", -dev.eta * dt / dev.e_cap)
                frag.constraints.append(
                    LinearCon(f"bess.soc.dyn.{dev.bus}.t{t}", "equipment", dyn, "=", 0.0)
                )
            if T > 1:
                final = Expr.term(f"SOC_{dev.bus}_{T-1}").add(f"SOC_{dev.bus}_0", -1.0)
                frag.constraints.append(
                    LinearCon(f"bess.soc.final.{dev.bus}", "equipment", final, "=", 0.0)
                )

    for dev in _sorted_devices(ctx, "pv"):
        for t in range(T):
            p_lo = 0.0 if dev.curtailable else dev.p_avail[t]
            frag.variables.append(
                Var(f"P_pv_{dev.bus}_{t}", "cont", p_lo, dev.p_avail[t], "equipment")
            )
            frag.variables.append(Var(f"Q_pv_{dev.bus}_{t}", "cont", -INF, INF, "equipment"))
            disc = Expr(
                quad={
                    (f"P_pv_{dev.bus}_{t}", f"P_pv_{dev.bus}_{t}"): 1.0,
                    (f"Q_pv_{dev.bus}_{t}", f"Q_pv_{dev.bus}_{t}"): 1.0,
                }
            )
            frag.constraints.append(
                QuadCon(
                    f"pv.cap.{dev.bus}.t{t}", "equipment", disc,
                    Expr.const(dev.s_max * dev.s_max),
                )
            )

    for dev in _sorted_devices(ctx, "svc"):
        for t in range(T):
            frag.variables.append(
                Var(f"Q_svc_{dev.bus}_{t}", "cont", 0.0, dev.q_max, "equipment")
            )

    ctx.fragments["equipment"] = frag
    return frag


# ---------------------------------------------------------------------------
# stage 3: power flow
# ---------------------------------------------------------------------------


def build_power_flow(ctx: FormulationContext) -> Fragment:
    """Branch-flow physics per step with device injections folded in.

    Per bus: active and reactive balance between injections, outgoing flows
    and the inbound flow net of its series loss.  Per branch: the voltage
    drop row and the (still exact, nonconvex) squared-current definition.
    The head voltage is pinned to one and the upstream import enters the
    head's balance as a free variable.
    """
    _require_stage(ctx, ("objective", "equipment"), "power_flow")
    case = ctx.work_case
    T = case.horizon.T
    frag = Fragment()
    children = case.children()
    parent = case.parent_branch()
    dev_p: dict[int, list[tuple[str, float]]] = {b.id: [] for b in case.buses}
    dev_q: dict[int, list[tuple[str, float]]] = {b.id: [] for b in case.buses}
    for dev in _sorted_devices(ctx, "dg"):
        dev_p[dev.bus].append(("P_dg_{bus}_{t}", 1.0))
        dev_q[dev.bus].append(("Q_dg_{bus}_{t}", 1.0))
    for dev in _sorted_devices(ctx, "bess"):
        dev_p[dev.bus].append(("P_dis_{bus}_{t}", 1.0))
        dev_p[dev.bus].append(("P_cha_{bus}_{t}", -1.0))
    for dev in _sorted_devices(ctx, "pv"):
        dev_p[dev.bus].append(("P_pv_{bus}_{t}", 1.0))
        dev_q[dev.bus].append(("Q_pv_{bus}_{t}", 1.0))
    for dev in _sorted_devices(ctx, "svc"):
        dev_q[dev.bus].append(("Q_svc_{bus}_{t}", 1.0))

    for t in range(T):
        for bus in case.bus_ids():
            frag.variables.append(_var_v(bus, t))
        frag.variables.append(_var_grid("P", t))
        frag.variables.append(_var_grid("Q", t))
        for br in case.branches:
            for sym in ("P", "Q", "l"):
                frag.variables.append(_var_branch(sym, br.key, t))

        for bus in sorted(case.bus_ids()):
            b = case.bus(bus)
            p_row = Expr()
            q_row = Expr()
            for template, coef in dev_p[bus]:
                p_row.add(template.format(bus=bus, t=t), coef)
            for template, coef in dev_q[bus]:
                q_row.add(template.format(bus=bus, t=t), coef)
            if bus == ROOT_BUS:
                p_row.add(f"P_grid_{t}", 1.0)
                q_row.add(f"Q_grid_{t}", 1.0)
            for out in children[bus]:
                p_row.add(f"P_{out.key}_{t}", -1.0)
                q_row.add(f"Q_{out.key}_{t}", -1.0)
            if bus != ROOT_BUS:
                br = parent[bus]
                p_row.add(f"P_{br.key}_{t}", 1.0)
                p_row.add(f"l_{br.key}_{t}", -br.r)
                q_row.add(f"Q_{br.key}_{t}", 1.0)
                q_row.add(f"l_{br.key}_{t}", -br.x)
            frag.constraints.append(
                LinearCon(f"pf.p.{bus}.t{t}", "power_flow", p_row, "=", b.p_load[t])
            )
            frag.constraints.append(
                LinearCon(f"pf.q.{bus}.t{t}", "power_flow", q_row, "=", b.q_load[t])
            )

        for e, br in enumerate(case.branches):
            drop = Expr.term(f"v_{br.to_bus}_{t}")
            drop.add(f"v_{br.from_bus}_{t}", -1.0)
            drop.add(f"P_{br.key}_{t}", 2.0 * br.r)
            drop.add(f"Q_{br.key}_{t}", 2.0 * br.x)
            drop.add(f"l_{br.key}_{t}", -(br.r * br.r + br.x * br.x))
            frag.constraints.append(
                LinearCon(f"pf.volt.{e}.t{t}", "power_flow", drop, "=", 0.0)
            )
            lhs = Expr(
                quad={
                    (f"P_{br.key}_{t}", f"P_{br.key}_{t}"): 1.0,
                    (f"Q_{br.key}_{t}", f"Q_{br.key}_{t}"): 1.0,
                }
            )
            rhs = Expr(quad={tuple(sorted((f"l_{br.key}_{t}", f"v_{br.from_bus}_{t}"))): 1.0})
            frag.constraints.append(
                QuadEqCon(f"pf.curr.{e}.t{t}", "power_flow", lhs, rhs)
            )

        frag.constraints.append(
            LinearCon(f"pf.root.t{t}", "power_flow", Expr.term(f"v_{ROOT_BUS}_{t}"), "=", 1.0)
        )

    ctx.fragments["power_flow"] = frag
    return frag


# ---------------------------------------------------------------------------
# stage 4: additional constraints
# ---------------------------------------------------------------------------


def build_additional(ctx: FormulationContext) -> Fragment:
    """Requested safety envelopes; empty request gives an empty fragment.

    Voltage safety bounds the squared magnitude at every bus and step;
    branch safety caps apparent power per branch and step.  Case limits
    apply unless the request overrides them.
    """
    _require_stage(ctx, ("objective", "equipment", "power_flow"), "additional")
    case = ctx.work_case
    T = case.horizon.T
    frag = Fragment()
    for con in ctx.requirements.extra_constraints:
        if con.kind == "voltage_safety":
            v_min = con.param("v_min", case.limits.v_min)
            v_max = con.param("v_max", case.limits.v_max)
            for t in range(T):
                for bus in sorted(case.bus_ids()):
                    v = Expr.term(f"v_{bus}_{t}")
                    frag.constraints.append(
                        LinearCon(f"safe.v.lo.{bus}.t{t}", "additional", v, ">=", v_min * v_min)
                    )
                    frag.constraints.append(
                        LinearCon(f"safe.v.hi.{bus}.t{t}", "additional", v.copy(), "<=", v_max * v_max)
                    )
        elif con.kind == "branch_safety":
            s_max = con.param("s_max", case.limits.s_branch_max)
            for t in range(T):
                for e, br in enumerate(case.branches):
                    lhs = Expr(
                        quad={
                            (f"P_{br.key}_{t}", f"P_{br.key}_{t}"): 1.0,
                            (f"Q_{br.key}_{t}", f"Q_{br.key}_{t}"): 1.0,
                        }
                    )
                    frag.constraints.append(
                        QuadCon(f"safe.s.{e}.t{t}", "additional", lhs, Expr.const(s_max * s_max))
                    )
        else:
            raise FormulationError(f"unknown extra constraint kind {con.kind!r}")
    ctx.fragments["additional"] = frag
    return frag


# ---------------------------------------------------------------------------
# stage 5: assemble
# ---------------------------------------------------------------------------


def assemble(ctx: FormulationContext) -> Model:
    """Merge all four fragments into a single validated model.

    Duplicate declarations must agree exactly; the result may still carry
    nonconvex rows and a pending min-max intent for ``convexify``.
    """
    for stage in ("objective", "equipment", "power_flow", "additional"):
        if stage not in ctx.fragments:
            raise FormulationError(f"assemble requires the {stage} fragment")
    req = ctx.requirements
    name = f"{req.district}_{req.objective}"
    if ctx.t_hat is not None:
        name += f"_t{ctx.t_hat}"
    model = Model(name, ctx.work_case.horizon.T, ctx.work_case.horizon.dt_hours)
    for stage in ("objective", "equipment", "power_flow", "additional"):
        frag = ctx.fragments[stage]
        for var in frag.variables:
            model.add_var(var)
        for con in frag.constraints:
            model.add_con(con)
    model.objective = (ctx.fragments["objective"].objective or Expr()).copy()
    model.minmax_intent = ctx.intent
    names = [c.name for c in model.constraints]
    if len(set(names)) != len(names):
        raise FormulationError("fragment merge produced duplicate row names")
    problems = validate_model(model)
    if problems:
        raise FormulationError("; ".join(problems))
    return model


# ---------------------------------------------------------------------------
# stage 6: convexify
# ---------------------------------------------------------------------------

_CURR_RE = re.compile(r"^pf\.curr\.(\d+)\.t(\d+)$")
_COMP_RE = re.compile(r"^bess\.comp\.(\d+)\.t(\d+)$")


def _cone_from_current(con: QuadEqCon) -> SocCon:
    """Exact ``P^2 + Q^2 = l*v`` relaxed to ``norm(2P, 2Q, l-v) <= l+v``."""
    squares = sorted(a for (a, b) in con.lhs.quad if a == b)
    bilinear = [key for key in con.rhs.quad if key[0] != key[1]]
    if len(squares) != 2 or len(bilinear) != 1:
        raise FormulationError(f"row {con.name}: unrecognized current-definition shape")
    p_name, q_name = squares
    pair = bilinear[0]
    l_name = pair[0] if pair[0].startswith("l_") else pair[1]
    v_name = pair[1] if pair[0].startswith("l_") else pair[0]
    m = _CURR_RE.match(con.name)
    cone_name = f"pf.cone.{m.group(1)}.t{m.group(2)}" if m else con.name + ".cone"
    vector = [
        Expr.term(p_name, 2.0),
        Expr.term(q_name, 2.0),
        Expr.term(l_name).add(v_name, -1.0),
    ]
    bound = Expr.term(l_name).add(v_name, 1.0)
    return SocCon(cone_name, "convexification", vector, bound)


def convexify(model: Model) -> Model:
    """Return an equivalent-or-relaxed model free of nonconvex content.

    Current-definition equalities become cone rows; each battery
    complementarity row becomes a binary with linked charge/discharge caps
    (the box bounds supply the big-M values); a pending min-max intent
    becomes ``min z`` over per-item epigraph rows.  Models with nothing to
    do pass through unchanged (idempotent).
    """
    out = Model(model.name, model.horizon_T, model.horizon_dt)
    out.variables = dict(model.variables)
    out.objective = model.objective.copy()
    new_rows = []
    for con in model.constraints:
        if isinstance(con, QuadEqCon):
            if _CURR_RE.match(con.name):
                new_rows.append(_cone_from_current(con))
            elif _COMP_RE.match(con.name):
                m = _COMP_RE.match(con.name)
                bus, t = m.group(1), m.group(2)
                dis = out.variables.get(f"P_dis_{bus}_{t}")
                cha = out.variables.get(f"P_cha_{bus}_{t}")
                if dis is None or cha is None:
                    raise FormulationError(f"row {con.name}: charge/discharge variables missing")
                u_name = f"u_{bus}_{t}"
                out.variables[u_name] = Var(u_name, "bin", 0.0, 1.0, "convexification")
                link_dis = Expr.term(dis.name).add(u_name, -dis.ub)
                new_rows.append(
                    LinearCon(f"bess.dis.bin.{bus}.t{t}", "convexification", link_dis, "<=", 0.0)
                )
                link_cha = Expr.term(cha.name).add(u_name, cha.ub)
                new_rows.append(
                    LinearCon(f"bess.cha.bin.{bus}.t{t}", "convexification", link_cha, "<=", cha.ub)
                )
            else:
                raise FormulationError(f"row {con.name}: no convexification rule applies")
        else:
            new_rows.append(con)
    out.constraints = new_rows
    if model.minmax_intent is not None:
        intent = model.minmax_intent
        out.variables["z"] = Var("z", "cont", 0.0, INF, "convexification")
        if intent.kind == "voltage_deviation":
            for name in sorted(out.variables):
                m = re.match(r"^v_(\d+)_(\d+)$", name)
                if not m:
                    continue
                lhs = Expr(constant=1.0, linear={name: -2.0}, quad={(name, name): 1.0})
                out.constraints.append(
                    QuadCon(f"cvx.epi.v.{m.group(1)}.t{m.group(2)}", "convexification", lhs, Expr.term("z"))
                )
        elif intent.kind == "branch_power":
            pairs: dict[tuple[str, str], tuple[str, str]] = {}
            for name in sorted(out.variables):
                m = re.match(r"^P_(\d+_\d+)_(\d+)$", name)
                if m:
                    pairs[(m.group(1), m.group(2))] = (name, f"Q_{m.group(1)}_{m.group(2)}")
            for (key, t), (p_name, q_name) in sorted(pairs.items()):
                if q_name not in out.variables:
                    raise FormulationError(f"branch {key}: reactive flow variable missing")
                lhs = Expr(quad={(p_name, p_name): 1.0, (q_name, q_name): 1.0})
                out.constraints.append(
                    QuadCon(f"cvx.epi.s.{key}.t{t}", "convexification", lhs, Expr.term("z"))
                )
        else:
            raise FormulationError(f"unknown min-max intent {intent.kind!r}")
        out.objective = Expr.term("z")
        out.minmax_intent = None
    problems = validate_model(out)
    if problems:
        raise FormulationError("; ".join(problems))
    return out


def formulate(req: StructuredRequirements, case: NetworkCase) -> Model:
    """Run all six stages and return the convex model (not yet canonicalized)."""
    ctx = make_context(req, case)
    build_objective(ctx)
    build_equipment(ctx)
    build_power_flow(ctx)
    build_additional(ctx)
    return convexify(assemble(ctx))
