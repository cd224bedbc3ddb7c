"""Solve canonical optimization models and turn the results into dispatch data.

The entry points are ``solve_socp`` for continuous models, ``solve_misocp``
for models with binary variables (best-first branch and bound on top of the
continuous relaxation), ``extract_strategy`` to convert a solution vector
into a dispatch strategy document, and ``check_tightness`` to measure how
far the conic relaxation sits from the original branch-current equalities.

Models are presolved before hitting the interior-point method: variables
with equal bounds are substituted out and every row is scaled to unit
infinity norm (cone blocks uniformly, so membership is preserved).
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .cases import NetworkCase
from .ipm import ConeDims, solve_conic
from .modelir import (
    Expr,
    LinearCon,
    Model,
    ModelError,
    SocCon,
    canonicalize,
    format_number,
    print_model,
)

BIG_BOUND = 1e18


class SolverError(ModelError):
    """Model cannot be lowered to standard conic form."""


class StrategyError(ModelError):
    """Solution vector does not line up with the model or the case."""


class ExchangeError(ModelError):
    """Malformed solver exchange file."""


@dataclass(frozen=True)
class SolveOptions:
    feastol: float = 1e-8
    gaptol: float = 1e-8
    max_iterations: int = 200
    integrality_tol: float = 1e-6
    mip_gap_abs: float = 1e-6
    mip_gap_rel: float = 1e-6
    node_limit: int = 10000


@dataclass
class Solution:
    status: str  # optimal | infeasible | unbounded | iteration_limit | node_limit
    objective: float | None
    values: dict[str, float]
    iterations: int
    nodes: int = 1
    pres: float = 0.0
    dres: float = 0.0
    gap: float = 0.0
    max_violation: float = 0.0
    best_bound: float | None = None


# ---------------------------------------------------------------------------
# lowering to standard form
# ---------------------------------------------------------------------------


def _substitute(expr: Expr, fixed: dict[str, float]) -> Expr:
    if not fixed:
        return expr.cleaned()
    out = Expr(constant=expr.constant)
    for name, coef in expr.linear.items():
        if name in fixed:
            out.add_const(coef * fixed[name])
        else:
            out.add(name, coef)
    for (a, b), coef in expr.quad.items():
        if a in fixed and b in fixed:
            out.add_const(coef * fixed[a] * fixed[b])
        elif a in fixed:
            out.add(b, coef * fixed[a])
        elif b in fixed:
            out.add(a, coef * fixed[b])
        else:
            out.add_quad(a, b, coef)
    return out.cleaned()


@dataclass
class _StandardForm:
    var_names: list[str]
    index: dict[str, int]
    c: np.ndarray
    obj_const: float
    A: sp.csc_matrix
    b: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    dims: ConeDims
    fixed: dict[str, float]


def _expr_row(expr: Expr, index: dict[str, int], n: int) -> tuple[list[int], list[float], float]:
    cols, vals = [], []
    for name, coef in expr.linear.items():
        cols.append(index[name])
        vals.append(coef)
    return cols, vals, expr.constant


def lower_model(model: Model) -> _StandardForm | Solution:
    """Lower a canonical model to ``min c'x: Ax=b, Gx+s=h, s in K``.

    Binary variables are relaxed onto [0, 1].  Returns a Solution directly
    when presolve already decides the outcome (all variables fixed, or a
    constant row is violated).
    """
    model = canonicalize(model)

    fixed = {
        name: var.lb
        for name, var in model.variables.items()
        if var.lb == var.ub and math.isfinite(var.lb)
    }
    free_names = sorted(n for n in model.variables if n not in fixed)
    index = {name: i for i, name in enumerate(free_names)}
    n = len(free_names)

    obj = _substitute(model.objective, fixed)
    if obj.quad:
        raise SolverError("canonical objective must be affine")
    c = np.zeros(n)
    for name, coef in obj.linear.items():
        c[index[name]] = coef

    eq_rows: list[tuple[list[int], list[float], float]] = []
    lin_cone_rows: list[tuple[list[int], list[float], float]] = []
    soc_blocks: list[list[tuple[list[int], list[float], float]]] = []

    def push_ineq(cols, vals, rhs):  # a'x <= rhs as a row of Gx + s = h
        lin_cone_rows.append((cols, vals, rhs))

    for con in model.constraints:
        if isinstance(con, LinearCon):
            expr = _substitute(con.expr, fixed)
            if expr.quad:
                raise SolverError(f"row {con.name}: quadratic terms survived canonicalize")
            cols, vals, const = _expr_row(expr, index, n)
            rhs = con.rhs - const
            if not cols:
                if con.rel == "=":
                    bad = abs(rhs) > 1e-9
                elif con.rel == "<=":
                    bad = rhs < -1e-9
                else:
                    bad = rhs > 1e-9
                if bad:
                    return Solution("infeasible", None, {}, 0)
                continue
            if con.rel == "=":
                eq_rows.append((cols, vals, rhs))
            elif con.rel == "<=":
                push_ineq(cols, vals, rhs)
            else:
                push_ineq(cols, [-v for v in vals], -rhs)
        elif isinstance(con, SocCon):
            bound = _substitute(con.bound, fixed)
            legs = [_substitute(v, fixed) for v in con.vector]
            if not bound.linear and all(not leg.linear for leg in legs):
                norm = math.sqrt(sum(leg.constant**2 for leg in legs))
                if norm > bound.constant + 1e-9:
                    return Solution("infeasible", None, {}, 0)
                continue
            block = []
            cols, vals, const = _expr_row(bound, index, n)
            block.append(([c_ for c_ in cols], [-v for v in vals], const))
            for leg in legs:
                cols, vals, const = _expr_row(leg, index, n)
                block.append(([c_ for c_ in cols], [-v for v in vals], const))
            soc_blocks.append(block)
        else:
            raise SolverError(f"row {con.name}: unsupported constraint kind {con.kind}")

    for name in free_names:
        var = model.variables[name]
        lb, ub = var.lb, var.ub
        if var.kind == "bin":
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            return Solution("infeasible", None, {}, 0)
        col = index[name]
        if math.isfinite(lb) and abs(lb) < BIG_BOUND:
            push_ineq([col], [-1.0], -lb)
        if math.isfinite(ub) and abs(ub) < BIG_BOUND:
            push_ineq([col], [1.0], ub)

    if n == 0:
        return Solution("optimal", obj.constant, dict(fixed), 0)

    # assemble with per-row scaling to unit infinity norm
    def build(rows, scales):
        data, ri, ci, rhs = [], [], [], []
        for r, (cols, vals, rv) in enumerate(rows):
            sc = scales[r]
            rhs.append(rv / sc)
            for col, val in zip(cols, vals):
                ri.append(r)
                ci.append(col)
                data.append(val / sc)
        mat = sp.csc_matrix((data, (ri, ci)), shape=(len(rows), n))
        return mat, np.array(rhs) if rows else np.zeros(0)

    def row_scale(cols_vals_rhs):
        _, vals, _ = cols_vals_rhs
        mx = max((abs(v) for v in vals), default=0.0)
        return mx if mx > 1e-12 else 1.0

    eq_scales = [row_scale(r) for r in eq_rows]
    A, b = build(eq_rows, eq_scales)

    g_rows = list(lin_cone_rows)
    g_scales = [row_scale(r) for r in lin_cone_rows]
    q_dims = []
    for block in soc_blocks:
        sc = max((row_scale(r) for r in block), default=1.0)
        for r in block:
            g_rows.append(r)
            g_scales.append(sc)
        q_dims.append(len(block))
    G, h = build(g_rows, g_scales)
    dims = ConeDims(len(lin_cone_rows), tuple(q_dims))

    return _StandardForm(free_names, index, c, obj.constant, A, b, G, h, dims, fixed)


# ---------------------------------------------------------------------------
# continuous solve
# ---------------------------------------------------------------------------


def _violations(model: Model, values: dict[str, float]) -> float:
    worst = 0.0
    for con in model.constraints:
        if isinstance(con, LinearCon):
            lhs = con.expr.value(values)
            if con.rel == "=":
                worst = max(worst, abs(lhs - con.rhs))
            elif con.rel == "<=":
                worst = max(worst, lhs - con.rhs)
            else:
                worst = max(worst, con.rhs - lhs)
        elif isinstance(con, SocCon):
            norm = math.sqrt(sum(leg.value(values) ** 2 for leg in con.vector))
            worst = max(worst, norm - con.bound.value(values))
    for name, var in model.variables.items():
        val = values[name]
        if math.isfinite(var.lb):
            worst = max(worst, var.lb - val)
        if math.isfinite(var.ub):
            worst = max(worst, val - var.ub)
    return max(worst, 0.0)


def solve_socp(model: Model, options: SolveOptions | None = None) -> Solution:
    """Solve the continuous (relaxed, for binaries) model.

    Binary variables are treated as continuous on [0, 1]; use
    ``solve_misocp`` to enforce integrality.
    """
    options = options or SolveOptions()
    lowered = lower_model(model)
    if isinstance(lowered, Solution):
        if lowered.status == "optimal" and lowered.values:
            lowered.max_violation = _violations(model, lowered.values)
        return lowered

    sf = lowered
    res = solve_conic(
        sf.c, sf.A, sf.b, sf.G, sf.h, sf.dims,
        feastol=options.feastol, gaptol=options.gaptol, max_iter=options.max_iterations,
    )
    if res.status in ("optimal", "iteration_limit"):
        values = dict(sf.fixed)
        values.update({name: float(res.x[i]) for name, i in sf.index.items()})
        objective = model.objective.value(values)
        sol = Solution(
            res.status, objective, values, res.iterations,
            pres=res.pres, dres=res.dres, gap=res.gap,
        )
        sol.max_violation = _violations(model, values)
        return sol
    return Solution(res.status, None, {}, res.iterations, pres=res.pres, dres=res.dres, gap=res.gap)


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------


def _with_fixes(model: Model, fixes: dict[str, float]) -> Model:
    if not fixes:
        return model
    out = model.copy()
    for name, val in fixes.items():
        var = out.variables[name]
        out.variables[name] = replace(var, lb=val, ub=val)
    return out


def solve_misocp(model: Model, options: SolveOptions | None = None) -> Solution:
    """Best-first branch and bound over the binary variables.

    Nodes are ordered by relaxation bound with insertion order breaking
    ties, branching picks the most fractional binary (lowest name on ties),
    and a node is fixed by collapsing the variable bounds.  With no binary
    variables this is exactly ``solve_socp``.
    """
    options = options or SolveOptions()
    binaries = sorted(n for n, v in model.variables.items() if v.kind == "bin")
    if not binaries:
        return solve_socp(model, options)

    heap: list[tuple[float, int, dict[str, float]]] = []
    seq = 0
    heapq.heappush(heap, (-math.inf, seq, {}))
    incumbent: Solution | None = None
    nodes = 0
    saw_unbounded = False

    def gap_ok(bound: float) -> bool:
        if incumbent is None or incumbent.objective is None:
            return False
        best = incumbent.objective
        return bound >= best - max(options.mip_gap_abs, options.mip_gap_rel * abs(best))

    while heap:
        bound, _, fixes = heapq.heappop(heap)
        if gap_ok(bound):
            break
        if nodes >= options.node_limit:
            if incumbent is not None:
                incumbent.status = "node_limit"
                incumbent.nodes = nodes
                incumbent.best_bound = bound
                return incumbent
            return Solution("node_limit", None, {}, 0, nodes=nodes, best_bound=bound)

        relaxed = solve_socp(_with_fixes(model, fixes), options)
        nodes += 1
        if relaxed.status == "unbounded":
            saw_unbounded = True
            break
        if relaxed.status in ("infeasible",):
            continue
        if relaxed.objective is None:
            continue
        if gap_ok(relaxed.objective):
            continue

        fractional = [
            name
            for name in binaries
            if name not in fixes
            and min(relaxed.values[name] - 0.0, 1.0 - relaxed.values[name]) > options.integrality_tol
            and abs(relaxed.values[name] - round(relaxed.values[name])) > options.integrality_tol
        ]
        if not fractional:
            rounded = dict(relaxed.values)
            for name in binaries:
                rounded[name] = float(round(rounded[name]))
            candidate = Solution(
                "optimal", relaxed.objective, rounded, relaxed.iterations,
                pres=relaxed.pres, dres=relaxed.dres, gap=relaxed.gap,
            )
            candidate.max_violation = _violations(model, rounded)
            if incumbent is None or candidate.objective < incumbent.objective:
                incumbent = candidate
            continue

        pick = min(fractional, key=lambda nm: (abs(relaxed.values[nm] - 0.5), nm))
        for val in (0.0, 1.0):
            seq += 1
            child = dict(fixes)
            child[pick] = val
            heapq.heappush(heap, (relaxed.objective, seq, child))

    if saw_unbounded:
        return Solution("unbounded", None, {}, 0, nodes=nodes)
    if incumbent is not None:
        incumbent.nodes = nodes
        return incumbent
    return Solution("infeasible", None, {}, 0, nodes=nodes)


# ---------------------------------------------------------------------------
# dispatch strategy extraction
# ---------------------------------------------------------------------------

_RE_VOLT = re.compile(r"^v_(\d+)_(\d+)$")
_RE_BRANCH = re.compile(r"^(P|Q|l)_(\d+_\d+)_(\d+)$")
_RE_GRID = re.compile(r"^(P|Q)_grid_(\d+)$")
_RE_DEVICE = re.compile(r"^(P_dg|Q_dg|P_dis|P_cha|SOC|u|P_pv|Q_pv|Q_svc)_(\d+)_(\d+)$")

_DEVICE_KIND = {
    "P_dg": "dg", "Q_dg": "dg",
    "P_dis": "bess", "P_cha": "bess", "SOC": "bess", "u": "bess",
    "P_pv": "pv", "Q_pv": "pv",
    "Q_svc": "svc",
}


@dataclass
class DispatchStrategy:
    model_name: str
    status: str
    objective_value: float
    horizon_T: int
    dt_hours: float
    import_schedule: list[dict]
    voltages: dict[int, list[float]]
    branch_flows: list[dict]
    devices: list[dict]
    kpis: dict[str, float]

    def to_document(self) -> dict:
        return {
            "model": self.model_name,
            "status": self.status,
            "objective_value": self.objective_value,
            "horizon": {"T": self.horizon_T, "dt_hours": self.dt_hours},
            "import_schedule": self.import_schedule,
            "voltages": {str(bus): mags for bus, mags in sorted(self.voltages.items())},
            "branch_flows": self.branch_flows,
            "devices": self.devices,
            "kpis": self.kpis,
        }


def extract_strategy(model: Model, solution: Solution, case: NetworkCase) -> DispatchStrategy:
    """Turn a solved model into a dispatch strategy document.

    The case must match the model horizon (pass the snapshot projection for
    single-step models).  Every variable the model declares must carry a
    value in the solution.
    """
    if solution.status not in ("optimal", "node_limit", "iteration_limit"):
        raise StrategyError(f"cannot extract a strategy from a {solution.status} solution")
    if model.horizon_T != case.horizon.T:
        raise StrategyError(
            f"model horizon T={model.horizon_T} does not match case horizon T={case.horizon.T}"
        )
    values = solution.values
    for name in model.variables:
        if name not in values:
            raise StrategyError(f"solution value missing for variable {name}")

    T = model.horizon_T
    branch_r = {br.key: br.r for br in case.branches}

    volts: dict[int, list[float]] = {}
    flows: dict[tuple[str, int], dict[str, float]] = {}
    grid: dict[int, dict[str, float]] = {}
    dev: dict[tuple[str, int], dict[int, dict[str, float]]] = {}

    for name in model.variables:
        val = float(values[name])
        m = _RE_VOLT.match(name)
        if m:
            bus, t = int(m.group(1)), int(m.group(2))
            volts.setdefault(bus, [0.0] * T)[t] = math.sqrt(max(val, 0.0))
            continue
        m = _RE_BRANCH.match(name)
        if m:
            sym, key, t = m.group(1), m.group(2), int(m.group(3))
            if key not in branch_r:
                raise StrategyError(f"variable {name} references branch {key} absent from the case")
            flows.setdefault((key, t), {})[sym] = val
            continue
        m = _RE_GRID.match(name)
        if m:
            grid.setdefault(int(m.group(2)), {})[m.group(1)] = val
            continue
        m = _RE_DEVICE.match(name)
        if m:
            sym, bus, t = m.group(1), int(m.group(2)), int(m.group(3))
            kind = _DEVICE_KIND[sym]
            dev.setdefault((kind, bus), {}).setdefault(t, {})[sym] = val

    import_schedule = [
        {"t": t, "p": grid.get(t, {}).get("P", 0.0), "q": grid.get(t, {}).get("Q", 0.0)}
        for t in range(T)
    ]

    branch_flows = []
    losses = 0.0
    max_apparent = 0.0
    for (key, t), row in sorted(flows.items()):
        p, q, lcur = row.get("P", 0.0), row.get("Q", 0.0), row.get("l", 0.0)
        apparent = math.hypot(p, q)
        max_apparent = max(max_apparent, apparent)
        losses += branch_r[key] * lcur
        branch_flows.append(
            {"branch": key, "t": t, "p": p, "q": q, "current_sq": lcur, "apparent": apparent}
        )

    installed = {(d.kind, d.bus) for d in case.devices}
    devices = []
    comp_gap = 0.0
    for (kind, bus), per_t in sorted(dev.items()):
        if (kind, bus) not in installed:
            raise StrategyError(f"model schedules a {kind} at bus {bus} that the case does not install")
        schedule = []
        for t in range(T):
            row = {"t": t}
            row.update({sym: v for sym, v in sorted(per_t.get(t, {}).items())})
            schedule.append(row)
            if kind == "bess" and t in per_t:
                dis = per_t[t].get("P_dis", 0.0)
                cha = per_t[t].get("P_cha", 0.0)
                comp_gap = max(comp_gap, min(dis, cha))
        devices.append({"kind": kind, "bus": bus, "schedule": schedule})

    cost = 0.0
    prices = case.prices
    for t in range(T):
        cost += prices.rho0[t] * grid.get(t, {}).get("P", 0.0)
        for (kind, bus), per_t in dev.items():
            row = per_t.get(t, {})
            if kind == "dg":
                cost += prices.rho_dg * row.get("P_dg", 0.0)
            elif kind == "bess":
                cost += prices.rho_bess_dis * row.get("P_dis", 0.0)
                cost += prices.rho_bess_cha * row.get("P_cha", 0.0)

    max_vdev = 0.0
    for mags in volts.values():
        for v in mags:
            max_vdev = max(max_vdev, abs(v - 1.0))

    balance = 0.0
    for t in range(T):
        inj = grid.get(t, {}).get("P", 0.0)
        for (kind, bus), per_t in dev.items():
            row = per_t.get(t, {})
            if kind == "dg":
                inj += row.get("P_dg", 0.0)
            elif kind == "bess":
                inj += row.get("P_dis", 0.0) - row.get("P_cha", 0.0)
            elif kind == "pv":
                inj += row.get("P_pv", 0.0)
        for bus in case.bus_ids():
            inj -= case.bus(bus).p_load[t]
        loss_t = sum(
            branch_r[key] * row.get("l", 0.0) for (key, tt), row in flows.items() if tt == t
        )
        balance = max(balance, abs(inj - loss_t))

    kpis = {
        "losses": losses,
        "energy_cost": cost,
        "max_voltage_deviation": max_vdev,
        "max_branch_apparent": max_apparent,
        "complementarity_gap": comp_gap,
        "balance_residual": balance,
    }
    return DispatchStrategy(
        model_name=model.name,
        status=solution.status,
        objective_value=solution.objective if solution.objective is not None else math.nan,
        horizon_T=T,
        dt_hours=model.horizon_dt,
        import_schedule=import_schedule,
        voltages=volts,
        branch_flows=branch_flows,
        devices=devices,
        kpis=kpis,
    )


# ---------------------------------------------------------------------------
# relaxation tightness
# ---------------------------------------------------------------------------


@dataclass
class TightnessReport:
    max_gap: float
    worst_row: str | None
    gaps: dict[str, float]
    tight: bool


def check_tightness(model: Model, solution: Solution, threshold: float = 1e-5) -> TightnessReport:
    """Measure l*v - (P^2 + Q^2) on every relaxed branch-current cone row.

    The cone rows carry the vector (2P, 2Q, l - v) bounded by l + v, so a
    quarter of the squared-bound slack is exactly the relaxation gap.
    """
    gaps: dict[str, float] = {}
    for con in model.constraints:
        if isinstance(con, SocCon) and con.name.startswith("pf.cone."):
            bound = con.bound.value(solution.values)
            sq = sum(leg.value(solution.values) ** 2 for leg in con.vector)
            gaps[con.name] = (bound**2 - sq) / 4.0
    if not gaps:
        return TightnessReport(0.0, None, {}, True)
    worst = max(gaps, key=lambda k: gaps[k])
    max_gap = gaps[worst]
    return TightnessReport(max_gap, worst, gaps, max_gap <= threshold)


# ---------------------------------------------------------------------------
# external solver exchange
# ---------------------------------------------------------------------------


def write_model_file(model: Model, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(print_model(model))


def write_solution_file(solution: Solution, path: str) -> None:
    lines = [f"status {solution.status}"]
    for name in sorted(solution.values):
        lines.append(f"{name} {format_number(solution.values[name])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_solution_file(text: str, model: Model) -> Solution:
    """Parse a ``status <word>`` plus ``<var> <value>`` exchange document."""
    status: str | None = None
    values: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ExchangeError(f"line {lineno}: expected '<name> <value>', got {raw!r}")
        key, val = parts
        if key == "status":
            if status is not None:
                raise ExchangeError(f"line {lineno}: duplicate status line")
            status = val
            continue
        if key not in model.variables:
            raise ExchangeError(f"line {lineno}: unknown variable {key!r}")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise ExchangeError(f"line {lineno}: bad value for {key!r}: {val!r}") from exc
    if status is None:
        raise ExchangeError("missing status line")
    objective = None
    if status in ("optimal", "node_limit", "iteration_limit") and values:
        missing = [n for n in model.variables if n not in values]
        if missing:
            raise ExchangeError(f"solution is missing values for: {', '.join(sorted(missing)[:5])}")
        objective = model.objective.value(values)
    sol = Solution(status, objective, values, 0)
    if values:
        sol.max_violation = _violations(model, values)
    return sol
