"""Structured dispatch requirements and their decorated-text form.

A dispatch request reduces to five fields: district, objective, horizon kind,
equipment set and extra safety constraints.  The decorated text form wraps
each field in an XML-ish tag so an upstream extractor can emit it and this
module can parse it back losslessly::

    <district>valley</district> <objective>min_loss</objective>
    <equipment>pv, svc</equipment> <constraints>voltage_safety</constraints>

Free-text interpretation is not this module's job; synonyms live in the
catalog document and normalization is a lookup, not language understanding.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .cases import NetworkCase

OBJECTIVES = (
    "min_cost",
    "min_loss",
    "min_voltage_deviation",
    "eliminate_voltage_violation",
    "eliminate_branch_violation",
)

DAY_AHEAD_OBJECTIVES = ("min_cost", "min_loss", "min_voltage_deviation")
SNAPSHOT_OBJECTIVES = ("eliminate_voltage_violation", "eliminate_branch_violation")

EQUIPMENT_KINDS = ("dg", "bess", "pv", "svc")

CONSTRAINT_KINDS = ("voltage_safety", "branch_safety")

TAG_ORDER = ("district", "objective", "timestep", "equipment", "constraints")

_TAG_RE = re.compile(r"<(/?)([a-z_]+)>")


class RequirementsError(ValueError):
    """Malformed decorated text or an inconsistent requirements value."""


@dataclass(frozen=True)
class HorizonKind:
    kind: str  # day_ahead | single_timestep
    t_hat: int = 0

    @staticmethod
    def day_ahead() -> "HorizonKind":
        return HorizonKind("day_ahead")

    @staticmethod
    def single_timestep(t_hat: int) -> "HorizonKind":
        return HorizonKind("single_timestep", t_hat)


@dataclass(frozen=True)
class ExtraConstraint:
    kind: str
    params: tuple[tuple[str, float], ...] = ()

    def param(self, name: str, default: float | None = None) -> float | None:
        for key, value in self.params:
            if key == name:
                return value
        return default


@dataclass(frozen=True)
class StructuredRequirements:
    district: str
    objective: str
    horizon: HorizonKind
    equipment: frozenset[str]
    extra_constraints: tuple[ExtraConstraint, ...] = ()


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogDistrict:
    name: str
    case_file: str
    synonyms: tuple[str, ...]
    description: str


@dataclass(frozen=True)
class Catalog:
    """Known districts plus the synonym tables used for normalization."""

    districts: dict[str, CatalogDistrict]
    objective_synonyms: dict[str, str]
    equipment_synonyms: dict[str, str]
    constraint_synonyms: dict[str, str]
    environment_notes: str

    def district_names(self) -> list[str]:
        return sorted(self.districts)


def load_catalog(text: str) -> Catalog:
    doc = json.loads(text)
    districts = {}
    for raw in doc["districts"]:
        d = CatalogDistrict(
            raw["name"], raw["case_file"], tuple(raw.get("synonyms", ())), raw.get("description", "")
        )
        districts[d.name] = d
    return Catalog(
        districts,
        {k.lower(): v for k, v in doc["objective_synonyms"].items()},
        {k.lower(): v for k, v in doc["equipment_synonyms"].items()},
        {k.lower(): v for k, v in doc["constraint_synonyms"].items()},
        doc.get("environment_notes", ""),
    )


# ---------------------------------------------------------------------------
# decorated text
# ---------------------------------------------------------------------------


def _find_tags(text: str) -> dict[str, str]:
    """Collect tag contents; duplicate or unbalanced tags are errors."""
    found: dict[str, str] = {}
    pos = 0
    while True:
        m = _TAG_RE.search(text, pos)
        if not m:
            break
        if m.group(1):
            raise RequirementsError(f"unmatched closing tag </{m.group(2)}>")
        name = m.group(2)
        close = f"</{name}>"
        end = text.find(close, m.end())
        if end < 0:
            raise RequirementsError(f"tag <{name}> is never closed")
        if name in found:
            raise RequirementsError(f"duplicate tag <{name}>")
        if name not in TAG_ORDER:
            raise RequirementsError(f"unknown tag <{name}>")
        found[name] = text[m.end() : end].strip()
        pos = end + len(close)
    return found


def _normalize(token: str, table: dict[str, str], canonical: tuple[str, ...], what: str) -> str:
    token = token.strip().lower()
    if token in canonical:
        return token
    if token in table:
        return table[token]
    raise RequirementsError(f"unknown {what} {token!r}")


_CONSTRAINT_RE = re.compile(r"^([a-z_ ]+?)(?:\(([^)]*)\))?$")


def _parse_constraint(token: str, catalog: Catalog) -> ExtraConstraint:
    m = _CONSTRAINT_RE.match(token.strip().lower())
    if not m:
        raise RequirementsError(f"malformed constraint entry {token!r}")
    kind = _normalize(m.group(1), catalog.constraint_synonyms, CONSTRAINT_KINDS, "constraint")
    params: list[tuple[str, float]] = []
    if m.group(2):
        for piece in m.group(2).split(","):
            if not piece.strip():
                continue
            if "=" not in piece:
                raise RequirementsError(f"constraint parameter {piece!r} is not key=value")
            key, value = piece.split("=", 1)
            try:
                params.append((key.strip(), float(value)))
            except ValueError as exc:
                raise RequirementsError(f"constraint parameter {piece!r}: bad number") from exc
    return ExtraConstraint(kind, tuple(sorted(params)))


def parse_decorated(text: str, catalog: Catalog) -> StructuredRequirements:
    """Parse decorated text into requirements, normalizing through the catalog.

    The tags may sit anywhere inside surrounding prose and in any order.
    Missing required tags, duplicates, unknown tokens and a ``<timestep>``
    attached to a day-ahead objective are all errors.
    """
    tags = _find_tags(text)
    for required in ("district", "objective", "equipment", "constraints"):
        if required not in tags:
            raise RequirementsError(f"missing required tag <{required}>")

    district_token = tags["district"].strip().lower()
    district = None
    for name, entry in catalog.districts.items():
        if district_token == name or district_token in entry.synonyms:
            district = name
            break
    if district is None:
        raise RequirementsError(f"unknown district {district_token!r}")

    objective = _normalize(tags["objective"], catalog.objective_synonyms, OBJECTIVES, "objective")

    equipment: set[str] = set()
    if tags["equipment"] not in ("", "none"):
        for token in tags["equipment"].split(","):
            equipment.add(_normalize(token, catalog.equipment_synonyms, EQUIPMENT_KINDS, "equipment"))

    constraints: list[ExtraConstraint] = []
    if tags["constraints"] not in ("", "none"):
        for token in tags["constraints"].split(";"):
            if token.strip():
                constraints.append(_parse_constraint(token, catalog))

    if objective in SNAPSHOT_OBJECTIVES:
        t_hat = 0
        if "timestep" in tags:
            try:
                t_hat = int(tags["timestep"])
            except ValueError as exc:
                raise RequirementsError(f"bad <timestep> value {tags['timestep']!r}") from exc
            if t_hat < 0:
                raise RequirementsError("timestep must be nonnegative")
        horizon = HorizonKind.single_timestep(t_hat)
    else:
        if "timestep" in tags:
            raise RequirementsError(
                f"<timestep> conflicts with day-ahead objective {objective!r}"
            )
        horizon = HorizonKind.day_ahead()

    return StructuredRequirements(
        district, objective, horizon, frozenset(equipment), tuple(constraints)
    )


def render_decorated(req: StructuredRequirements) -> str:
    """Render requirements as decorated text in the canonical tag order."""
    parts = [f"<district>{req.district}</district>"]
    parts.append(f"<objective>{req.objective}</objective>")
    if req.horizon.kind == "single_timestep":
        parts.append(f"<timestep>{req.horizon.t_hat}</timestep>")
    equipment = ", ".join(k for k in EQUIPMENT_KINDS if k in req.equipment) or "none"
    parts.append(f"<equipment>{equipment}</equipment>")
    if req.extra_constraints:
        rendered = []
        for con in req.extra_constraints:
            if con.params:
                inner = ",".join(f"{k}={v}" for k, v in con.params)
                rendered.append(f"{con.kind}({inner})")
            else:
                rendered.append(con.kind)
        parts.append(f"<constraints>{'; '.join(rendered)}</constraints>")
    else:
        parts.append("<constraints>none</constraints>")
    return " ".join(parts)


def validate_requirements(
    req: StructuredRequirements,
    catalog: Catalog | None = None,
    case: NetworkCase | None = None,
) -> list[str]:
    """Cross-check a requirements value against the catalog and a case."""
    problems: list[str] = []
    if req.objective not in OBJECTIVES:
        problems.append(f"unknown objective {req.objective!r}")
    elif req.objective in SNAPSHOT_OBJECTIVES:
        if req.horizon.kind != "single_timestep":
            problems.append(f"objective {req.objective} requires a single-timestep horizon")
    elif req.horizon.kind != "day_ahead":
        problems.append(f"objective {req.objective} requires the day-ahead horizon")
    for kind in req.equipment:
        if kind not in EQUIPMENT_KINDS:
            problems.append(f"unknown equipment kind {kind!r}")
    for con in req.extra_constraints:
        if con.kind not in CONSTRAINT_KINDS:
            problems.append(f"unknown constraint kind {con.kind!r}")
        if con.kind == "voltage_safety":
            v_min = con.param("v_min")
            v_max = con.param("v_max")
            if v_min is not None and v_max is not None and not (0 < v_min < v_max):
                problems.append("voltage_safety: need 0 < v_min < v_max")
        if con.kind == "branch_safety":
            s_max = con.param("s_max")
            if s_max is not None and s_max <= 0:
                problems.append("branch_safety: s_max must be positive")
    if catalog is not None and req.district not in catalog.districts:
        problems.append(f"district {req.district!r} not in catalog")
    if case is not None:
        installed = {d.kind for d in case.devices}
        for kind in sorted(req.equipment - installed):
            problems.append(f"equipment {kind!r} is not installed in district {case.district!r}")
        if req.horizon.kind == "single_timestep" and req.horizon.t_hat >= case.horizon.T:
            problems.append(
                f"timestep {req.horizon.t_hat} outside the case horizon (T={case.horizon.T})"
            )
    return problems
