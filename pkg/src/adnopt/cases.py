"""Radial distribution-network case documents and an exact load-flow sweep.

A case bundles the feeder graph (buses, branches with series impedance), the
installed controllable devices, per-step load/availability profiles, prices
and operating limits.  Everything is per-unit on a common base; voltages and
currents are carried as squared magnitudes throughout.  Bus 0 is the feeder
head: its voltage is pinned to 1.0 and imports from the upstream grid balance
the feeder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

ROOT_BUS = 0

SWEEP_TOL = 1e-12
SWEEP_MAX_ITER = 100
RESIDUAL_TOL = 1e-10


class CaseError(ValueError):
    """Malformed case document or violated case invariant."""


class PowerFlowError(RuntimeError):
    """Load-flow sweep failed to converge (voltage collapse or iteration cap)."""


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: tuple[float, ...]
    q_load: tuple[float, ...]


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def key(self) -> str:
        return f"{self.from_bus}_{self.to_bus}"


@dataclass(frozen=True)
class DG:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    r_max: float
    p_init: float | None = None

    kind = "dg"


@dataclass(frozen=True)
class BESS:
    bus: int
    p_dis_max: float
    p_cha_max: float
    soc_min: float
    soc_max: float
    soc_init: float
    eta: float
    e_cap: float  # usable energy, p.u.·h

    kind = "bess"


@dataclass(frozen=True)
class PV:
    bus: int
    s_max: float
    p_avail: tuple[float, ...]
    curtailable: bool = False

    kind = "pv"


@dataclass(frozen=True)
class SVC:
    bus: int
    q_max: float

    kind = "svc"


Device = DG | BESS | PV | SVC


@dataclass(frozen=True)
class Horizon:
    T: int
    dt_hours: float


@dataclass(frozen=True)
class Prices:
    rho0: tuple[float, ...]  # import price per step
    rho_dg: float
    rho_bess_dis: float
    rho_bess_cha: float


@dataclass(frozen=True)
class Limits:
    v_min: float
    v_max: float
    s_branch_max: float


@dataclass(frozen=True)
class NetworkCase:
    district: str
    horizon: Horizon
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    devices: tuple[Device, ...]
    prices: Prices
    limits: Limits

    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def devices_of(self, kind: str) -> list[Device]:
        return [d for d in self.devices if d.kind == kind]

    def children(self) -> dict[int, list[Branch]]:
        out: dict[int, list[Branch]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            out[br.from_bus].append(br)
        return out

    def parent_branch(self) -> dict[int, Branch]:
        return {br.to_bus: br for br in self.branches}


# ---------------------------------------------------------------------------
# document parsing
# ---------------------------------------------------------------------------

_DEVICE_FIELDS = {
    "dg": {"kind", "bus", "p_min", "p_max", "q_min", "q_max", "r_max", "p_init"},
    "bess": {"kind", "bus", "p_dis_max", "p_cha_max", "soc_min", "soc_max", "soc_init", "eta", "e_cap"},
    "pv": {"kind", "bus", "s_max", "p_avail", "curtailable"},
    "svc": {"kind", "bus", "q_max"},
}

_TOP_KEYS = {"district", "horizon", "buses", "branches", "devices", "prices", "limits"}


def _check_keys(obj: Mapping, allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise CaseError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise CaseError(f"{where}: missing key(s) {sorted(missing)}")


def _series(value, T: int, where: str) -> tuple[float, ...]:
    """Accept a scalar (broadcast) or a length-T list of numbers."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return tuple(float(value) for _ in range(T))
    if isinstance(value, list) and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        if len(value) != T:
            raise CaseError(f"{where}: profile length {len(value)} does not match T={T}")
        return tuple(float(v) for v in value)
    raise CaseError(f"{where}: expected a number or a list of numbers")


def load_case(text: str) -> NetworkCase:
    """Parse a case document (JSON text) and validate every invariant."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CaseError("case document must be a JSON object")
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS - {"devices"}, "case")

    hor = doc["horizon"]
    _check_keys(hor, {"T", "dt_hours"}, {"T", "dt_hours"}, "horizon")
    if not isinstance(hor["T"], int) or hor["T"] < 1:
        raise CaseError("horizon: T must be a positive integer")
    horizon = Horizon(hor["T"], float(hor["dt_hours"]))
    T = horizon.T

    buses = []
    for i, raw in enumerate(doc["buses"]):
        _check_keys(raw, {"id", "p_load", "q_load"}, {"id", "p_load", "q_load"}, f"buses[{i}]")
        buses.append(
            Bus(
                int(raw["id"]),
                _series(raw["p_load"], T, f"buses[{i}].p_load"),
                _series(raw["q_load"], T, f"buses[{i}].q_load"),
            )
        )

    branches = []
    for i, raw in enumerate(doc["branches"]):
        _check_keys(raw, {"from", "to", "r", "x"}, {"from", "to", "r", "x"}, f"branches[{i}]")
        branches.append(Branch(int(raw["from"]), int(raw["to"]), float(raw["r"]), float(raw["x"])))

    devices: list[Device] = []
    for i, raw in enumerate(doc.get("devices", [])):
        where = f"devices[{i}]"
        kind = raw.get("kind")
        if kind not in _DEVICE_FIELDS:
            raise CaseError(f"{where}: unknown device kind {kind!r}")
        _check_keys(raw, _DEVICE_FIELDS[kind], _DEVICE_FIELDS[kind] - {"p_init", "curtailable"}, where)
        if kind == "dg":
            devices.append(
                DG(
                    int(raw["bus"]),
                    float(raw["p_min"]),
                    float(raw["p_max"]),
                    float(raw["q_min"]),
                    float(raw["q_max"]),
                    float(raw["r_max"]),
                    None if raw.get("p_init") is None else float(raw["p_init"]),
                )
            )
        elif kind == "bess":
            devices.append(
                BESS(
                    int(raw["bus"]),
                    float(raw["p_dis_max"]),
                    float(raw["p_cha_max"]),
                    float(raw["soc_min"]),
                    float(raw["soc_max"]),
                    float(raw["soc_init"]),
                    float(raw["eta"]),
                    float(raw["e_cap"]),
                )
            )
        elif kind == "pv":
            devices.append(
                PV(
                    int(raw["bus"]),
                    float(raw["s_max"]),
                    _series(raw["p_avail"], T, f"{where}.p_avail"),
                    bool(raw.get("curtailable", False)),
                )
            )
        else:
            devices.append(SVC(int(raw["bus"]), float(raw["q_max"])))

    prices_raw = doc["prices"]
    _check_keys(
        prices_raw,
        {"rho0", "rho_dg", "rho_bess_dis", "rho_bess_cha"},
        {"rho0", "rho_dg", "rho_bess_dis", "rho_bess_cha"},
        "prices",
    )
    prices = Prices(
        _series(prices_raw["rho0"], T, "prices.rho0"),
        float(prices_raw["rho_dg"]),
        float(prices_raw["rho_bess_dis"]),
        float(prices_raw["rho_bess_cha"]),
    )

    limits_raw = doc["limits"]
    _check_keys(limits_raw, {"v_min", "v_max", "s_branch_max"}, {"v_min", "v_max", "s_branch_max"}, "limits")
    limits = Limits(float(limits_raw["v_min"]), float(limits_raw["v_max"]), float(limits_raw["s_branch_max"]))

    if not isinstance(doc["district"], str) or not doc["district"]:
        raise CaseError("district must be a non-empty string")

    case = NetworkCase(
        doc["district"], horizon, tuple(buses), tuple(branches), tuple(devices), prices, limits
    )
    problems = validate_case(case)
    if problems:
        raise CaseError("; ".join(problems))
    return case


def validate_case(case: NetworkCase) -> list[str]:
    """Return every violated invariant as a human-readable string."""
    problems: list[str] = []
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        problems.append("bus ids are not unique")
    if ROOT_BUS not in ids:
        problems.append(f"root bus {ROOT_BUS} is missing")
    id_set = set(ids)

    for br in case.branches:
        if br.from_bus not in id_set or br.to_bus not in id_set:
            problems.append(f"branch {br.key}: endpoint not a declared bus")
        if br.r < 0 or br.x < 0:
            problems.append(f"branch {br.key}: negative impedance")
        if br.r == 0 and br.x == 0:
            problems.append(f"branch {br.key}: zero impedance")

    # radial = connected tree rooted at the feeder head
    if len(case.branches) != len(case.buses) - 1:
        problems.append(
            f"network is not radial: {len(case.branches)} branches for {len(case.buses)} buses"
        )
    else:
        adjacency: dict[int, list[tuple[int, Branch]]] = {i: [] for i in id_set}
        for br in case.branches:
            if br.from_bus in id_set and br.to_bus in id_set:
                adjacency[br.from_bus].append((br.to_bus, br))
                adjacency[br.to_bus].append((br.from_bus, br))
        seen = {ROOT_BUS}
        frontier = [ROOT_BUS]
        parent: dict[int, int] = {}
        while frontier:
            node = frontier.pop()
            for nxt, _br in adjacency.get(node, []):
                if nxt not in seen:
                    seen.add(nxt)
                    parent[nxt] = node
                    frontier.append(nxt)
        if seen != id_set:
            problems.append("network is not radial: not all buses reachable from the root")
        else:
            for br in case.branches:
                if parent.get(br.to_bus) != br.from_bus:
                    problems.append(
                        f"branch {br.key}: must be oriented parent-to-child away from the root"
                    )

    per_bus_kinds: set[tuple[str, int]] = set()
    for dev in case.devices:
        if dev.bus not in id_set:
            problems.append(f"{dev.kind} device references unknown bus {dev.bus}")
        key = (dev.kind, dev.bus)
        if key in per_bus_kinds:
            problems.append(f"duplicate {dev.kind} device at bus {dev.bus}")
        per_bus_kinds.add(key)
        if isinstance(dev, DG):
            if dev.p_min > dev.p_max or dev.q_min > dev.q_max:
                problems.append(f"dg at bus {dev.bus}: empty operating box")
            if dev.r_max < 0:
                problems.append(f"dg at bus {dev.bus}: negative ramp limit")
        elif isinstance(dev, BESS):
            if dev.p_dis_max < 0 or dev.p_cha_max < 0:
                problems.append(f"bess at bus {dev.bus}: negative power limit")
            if not (dev.soc_min <= dev.soc_init <= dev.soc_max):
                problems.append(f"bess at bus {dev.bus}: soc_init outside [soc_min, soc_max]")
            if not (0.0 < dev.eta <= 1.0):
                problems.append(f"bess at bus {dev.bus}: efficiency must be in (0, 1]")
            if dev.e_cap <= 0:
                problems.append(f"bess at bus {dev.bus}: e_cap must be positive")
        elif isinstance(dev, PV):
            if dev.s_max < 0:
                problems.append(f"pv at bus {dev.bus}: negative inverter rating")
            if any(p < 0 for p in dev.p_avail):
                problems.append(f"pv at bus {dev.bus}: negative availability")
            if any(p > dev.s_max + 1e-12 for p in dev.p_avail):
                problems.append(f"pv at bus {dev.bus}: availability exceeds inverter rating")
        elif isinstance(dev, SVC):
            if dev.q_max < 0:
                problems.append(f"svc at bus {dev.bus}: negative rating")

    if not (0.0 < case.limits.v_min < case.limits.v_max):
        problems.append("limits: need 0 < v_min < v_max")
    if case.limits.s_branch_max <= 0:
        problems.append("limits: s_branch_max must be positive")
    if any(r < 0 for r in case.prices.rho0):
        problems.append("prices: negative import price")
    return problems


def serialize_case(case: NetworkCase) -> str:
    """Render a case back to its document form (inverse of ``load_case``)."""
    doc = {
        "district": case.district,
        "horizon": {"T": case.horizon.T, "dt_hours": case.horizon.dt_hours},
        "buses": [
            {"id": b.id, "p_load": list(b.p_load), "q_load": list(b.q_load)} for b in case.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x} for br in case.branches
        ],
        "devices": [_device_doc(d) for d in case.devices],
        "prices": {
            "rho0": list(case.prices.rho0),
            "rho_dg": case.prices.rho_dg,
            "rho_bess_dis": case.prices.rho_bess_dis,
            "rho_bess_cha": case.prices.rho_bess_cha,
        },
        "limits": {
            "v_min": case.limits.v_min,
            "v_max": case.limits.v_max,
            "s_branch_max": case.limits.s_branch_max,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _device_doc(dev: Device) -> dict:
    if isinstance(dev, DG):
        out = {
            "kind": "dg", "bus": dev.bus, "p_min": dev.p_min, "p_max": dev.p_max,
            "q_min": dev.q_min, "q_max": dev.q_max, "r_max": dev.r_max,
        }
        if dev.p_init is not None:
            out["p_init"] = dev.p_init
        return out
    if isinstance(dev, BESS):
        return {
            "kind": "bess", "bus": dev.bus, "p_dis_max": dev.p_dis_max,
            "p_cha_max": dev.p_cha_max, "soc_min": dev.soc_min, "soc_max": dev.soc_max,
            "soc_init": dev.soc_init, "eta": dev.eta, "e_cap": dev.e_cap,
        }
    if isinstance(dev, PV):
        out = {"kind": "pv", "bus": dev.bus, "s_max": dev.s_max, "p_avail": list(dev.p_avail)}
        if dev.curtailable:
            out["curtailable"] = True
        return out
    return {"kind": "svc", "bus": dev.bus, "q_max": dev.q_max}


def snapshot_at(case: NetworkCase, t_hat: int) -> NetworkCase:
    """Project every profile onto the single step ``t_hat`` (new T=1 case)."""
    if not (0 <= t_hat < case.horizon.T):
        raise CaseError(f"t_hat={t_hat} outside horizon [0, {case.horizon.T})")
    buses = tuple(
        Bus(b.id, (b.p_load[t_hat],), (b.q_load[t_hat],)) for b in case.buses
    )
    devices = tuple(
        replace(d, p_avail=(d.p_avail[t_hat],)) if isinstance(d, PV) else d
        for d in case.devices
    )
    prices = replace(case.prices, rho0=(case.prices.rho0[t_hat],))
    return replace(
        case,
        horizon=Horizon(1, case.horizon.dt_hours),
        buses=buses,
        devices=devices,
        prices=prices,
    )


# ---------------------------------------------------------------------------
# exact load flow (backward/forward sweep)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedSetpoint:
    """Fixed dispatch for one device: per-step active/reactive injections."""

    kind: str
    bus: int
    p: tuple[float, ...] | None = None
    q: tuple[float, ...] | None = None


@dataclass
class BaselineStep:
    v: dict[int, float]  # squared voltage magnitude per bus
    l: dict[str, float]  # squared current per branch key
    p_flow: dict[str, float]
    q_flow: dict[str, float]
    losses: float
    residual: float


@dataclass
class BaselineResult:
    steps: list[BaselineStep]

    @property
    def total_losses(self) -> float:
        return sum(s.losses for s in self.steps)

    def worst_voltage(self) -> tuple[float, float]:
        """(min, max) voltage magnitude over all buses and steps."""
        lo = min(min(s.v.values()) for s in self.steps)
        hi = max(max(s.v.values()) for s in self.steps)
        return math.sqrt(lo), math.sqrt(hi)


def _injections(
    case: NetworkCase, controls: Iterable[FixedSetpoint] | None
) -> tuple[dict[int, list[float]], dict[int, list[float]]]:
    """Net per-bus injections for a fixed-dispatch study.

    Passive defaults: DG off, BESS idle, SVC off, PV at its availability with
    zero reactive output.  ``controls`` overrides individual devices.
    """
    T = case.horizon.T
    override: dict[tuple[str, int], FixedSetpoint] = {}
    for sp in controls or ():
        override[(sp.kind, sp.bus)] = sp
    p_inj = {b.id: [-b.p_load[t] for t in range(T)] for b in case.buses}
    q_inj = {b.id: [-b.q_load[t] for t in range(T)] for b in case.buses}
    for dev in case.devices:
        sp = override.get((dev.kind, dev.bus))
        if isinstance(dev, PV):
            p = sp.p if sp and sp.p is not None else dev.p_avail
            q = sp.q if sp and sp.q is not None else (0.0,) * T
        else:
            p = sp.p if sp and sp.p is not None else (0.0,) * T
            q = sp.q if sp and sp.q is not None else (0.0,) * T
        if len(p) != T or len(q) != T:
            raise CaseError(f"setpoint for {dev.kind} at bus {dev.bus}: profile length mismatch")
        for t in range(T):
            p_inj[dev.bus][t] += p[t]
            q_inj[dev.bus][t] += q[t]
    return p_inj, q_inj


def baseline_power_flow(
    case: NetworkCase,
    controls: Iterable[FixedSetpoint] | None = None,
    max_iter: int = SWEEP_MAX_ITER,
    tol: float = SWEEP_TOL,
) -> BaselineResult:
    """Solve the exact branch-flow equations per step by repeated sweeps.

    Backward pass accumulates branch flows leaf-to-root (including the
    quadratic loss terms from the previous iterate), forward pass propagates
    squared voltages from the head, and the squared-current estimate is
    refreshed from the new flows.  Iteration stops when the largest voltage
    update falls below ``tol``; divergence raises ``PowerFlowError``.
    """
    problems = validate_case(case)
    if problems:
        raise CaseError("; ".join(problems))
    p_inj, q_inj = _injections(case, controls)
    children = case.children()
    order = _topological_order(case)  # root first
    steps: list[BaselineStep] = []
    for t in range(case.horizon.T):
        v = {b.id: 1.0 for b in case.buses}
        l = {br.key: 0.0 for br in case.branches}
        p_flow = {br.key: 0.0 for br in case.branches}
        q_flow = {br.key: 0.0 for br in case.branches}
        converged = False
        for _ in range(max_iter):
            # backward: flows at the sending end of each branch
            for bus in reversed(order):
                for br in children[bus]:
                    j = br.to_bus
                    p = -p_inj[j][t] + br.r * l[br.key]
                    q = -q_inj[j][t] + br.x * l[br.key]
                    for sub in children[j]:
                        p += p_flow[sub.key]
                        q += q_flow[sub.key]
                    p_flow[br.key] = p
                    q_flow[br.key] = q
            # forward: head voltage is pinned, drop along every branch
            max_dv = 0.0
            for bus in order:
                for br in children[bus]:
                    z2 = br.r * br.r + br.x * br.x
                    v_new = (
                        v[bus]
                        - 2.0 * (br.r * p_flow[br.key] + br.x * q_flow[br.key])
                        + z2 * l[br.key]
                    )
                    max_dv = max(max_dv, abs(v_new - v[br.to_bus]))
                    v[br.to_bus] = v_new
                    if v_new <= 0.0 or not math.isfinite(v_new):
                        raise PowerFlowError(
                            f"voltage collapse at bus {br.to_bus}, step {t}"
                        )
            for br in case.branches:
                l[br.key] = (
                    p_flow[br.key] ** 2 + q_flow[br.key] ** 2
                ) / v[br.from_bus]
            if max_dv < tol:
                converged = True
                break
        if not converged:
            raise PowerFlowError(f"no convergence after {max_iter} sweeps at step {t}")
        residual = _flow_residual(case, p_inj, q_inj, v, l, p_flow, q_flow, t)
        if residual > RESIDUAL_TOL:
            raise PowerFlowError(
                f"converged sweep left residual {residual:.3e} at step {t}"
            )
        losses = sum(br.r * l[br.key] for br in case.branches)
        steps.append(BaselineStep(v, l, p_flow, q_flow, losses, residual))
    return BaselineResult(steps)


def _topological_order(case: NetworkCase) -> list[int]:
    children = case.children()
    order = [ROOT_BUS]
    cursor = 0
    while cursor < len(order):
        for br in children[order[cursor]]:
            order.append(br.to_bus)
        cursor += 1
    return order


def _flow_residual(case, p_inj, q_inj, v, l, p_flow, q_flow, t) -> float:
    """Largest absolute violation of the branch-flow equations (root import free)."""
    children = case.children()
    parent = case.parent_branch()
    worst = 0.0
    for bus in case.bus_ids():
        if bus == ROOT_BUS:
            continue  # import at the head is the free balance term
        br = parent[bus]
        p = p_inj[bus][t] - sum(p_flow[c.key] for c in children[bus])
        p += p_flow[br.key] - br.r * l[br.key]
        q = q_inj[bus][t] - sum(q_flow[c.key] for c in children[bus])
        q += q_flow[br.key] - br.x * l[br.key]
        worst = max(worst, abs(p), abs(q))
    for br in case.branches:
        z2 = br.r * br.r + br.x * br.x
        dv = v[br.to_bus] - v[br.from_bus] + 2.0 * (br.r * p_flow[br.key] + br.x * q_flow[br.key]) - z2 * l[br.key]
        cur = l[br.key] * v[br.from_bus] - (p_flow[br.key] ** 2 + q_flow[br.key] ** 2)
        worst = max(worst, abs(dv), abs(cur))
    worst = max(worst, abs(v[ROOT_BUS] - 1.0))
    return worst
