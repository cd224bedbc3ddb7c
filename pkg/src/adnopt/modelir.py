"""Optimization-model intermediate representation and its text format.

A model is a named collection of variables, one minimization objective and a
list of tagged constraints.  Every constraint (and the objective) belongs to
one of five components so downstream grading can compare models piecewise:
``objective``, ``equipment``, ``power_flow``, ``additional`` and
``convexification``.

The text format is line oriented::

    problem <ident>
    horizon T=<int> dt=<number>
    var <ident> kind=(cont|bin) lb=(<number>|-inf) ub=(<number>|+inf) [tag=<component>]
    min: <expr>
    lin <ident> tag=<component>: <expr> (<=|=|>=) <number>
    quad <ident> tag=<component>: <expr> <= <affine-expr>
    soc <ident> tag=<component>: norm(<affine>{, <affine>}) <= <affine>

``#`` starts a comment, blank lines are ignored, and an expression is a signed
sum of ``<number>``, ``<number>*<ident>`` and ``<number>*<ident>*<ident>``
terms (a bare ident is accepted as coefficient one).  Printing is
deterministic: variables sort by name, constraints by (component, name), and
numbers round-trip exactly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace

COMPONENTS = ("objective", "equipment", "power_flow", "additional", "convexification")

_COMPONENT_RANK = {name: i for i, name in enumerate(COMPONENTS)}

IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")

INF = math.inf


class ModelError(ValueError):
    """Base class for model construction and validation failures."""


class ModelSyntaxError(ModelError):
    """Raised by the parser; carries the 1-based line and column."""

    def __init__(self, message: str, line: int, col: int) -> None:
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class ModelValidationError(ModelError):
    """Raised when a structurally well-formed model violates an invariant."""


# ---------------------------------------------------------------------------
# expressions
# ---------------------------------------------------------------------------


def _quad_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class Expr:
    """Sparse polynomial of degree at most two.

    ``linear`` maps variable name to coefficient; ``quad`` maps an ordered
    name pair to coefficient.  Zero coefficients are dropped by ``cleaned``.
    """

    constant: float = 0.0
    linear: dict[str, float] = field(default_factory=dict)
    quad: dict[tuple[str, str], float] = field(default_factory=dict)

    def add_const(self, c: float) -> "Expr":
        self.constant += c
        return self

    def add(self, name: str, coef: float) -> "Expr":
        self.linear[name] = self.linear.get(name, 0.0) + coef
        return self

    def add_quad(self, a: str, b: str, coef: float) -> "Expr":
        key = _quad_key(a, b)
        self.quad[key] = self.quad.get(key, 0.0) + coef
        return self

    def add_expr(self, other: "Expr", scale: float = 1.0) -> "Expr":
        self.constant += scale * other.constant
        for name, coef in other.linear.items():
            self.add(name, scale * coef)
        for key, coef in other.quad.items():
            self.quad[key] = self.quad.get(key, 0.0) + scale * coef
        return self

    def cleaned(self) -> "Expr":
        """Copy with exact-zero coefficients removed."""
        return Expr(
            self.constant,
            {k: v for k, v in self.linear.items() if v != 0.0},
            {k: v for k, v in self.quad.items() if v != 0.0},
        )

    def copy(self) -> "Expr":
        return Expr(self.constant, dict(self.linear), dict(self.quad))

    @property
    def is_affine(self) -> bool:
        return not any(v != 0.0 for v in self.quad.values())

    @property
    def is_constant(self) -> bool:
        return self.is_affine and not any(v != 0.0 for v in self.linear.values())

    def variables(self) -> set[str]:
        names = {n for n, c in self.linear.items() if c != 0.0}
        for (a, b), c in self.quad.items():
            if c != 0.0:
                names.add(a)
                names.add(b)
        return names

    def value(self, point: dict[str, float]) -> float:
        total = self.constant
        for name, coef in self.linear.items():
            total += coef * point[name]
        for (a, b), coef in self.quad.items():
            total += coef * point[a] * point[b]
        return total

    @staticmethod
    def const(c: float) -> "Expr":
        return Expr(constant=c)

    @staticmethod
    def term(name: str, coef: float = 1.0) -> "Expr":
        return Expr(linear={name: coef})


def expr_equal(a: Expr, b: Expr, tol: float = 0.0) -> bool:
    """Structural equality of two expressions up to a coefficient tolerance."""
    ac, bc = a.cleaned(), b.cleaned()
    if abs(ac.constant - bc.constant) > tol:
        return False
    for keys, da, db in ((set(ac.linear) | set(bc.linear), ac.linear, bc.linear),):
        for k in keys:
            if abs(da.get(k, 0.0) - db.get(k, 0.0)) > tol:
                return False
    qkeys = set(ac.quad) | set(bc.quad)
    for k in qkeys:
        if abs(ac.quad.get(k, 0.0) - bc.quad.get(k, 0.0)) > tol:
            return False
    return True


# ---------------------------------------------------------------------------
# variables and constraints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str
    kind: str = "cont"  # cont | bin
    lb: float = -INF
    ub: float = INF
    tag: str | None = None


@dataclass
class LinearCon:
    """Affine row ``expr (<=|=|>=) rhs``; any expr constant folds into rhs."""

    name: str
    tag: str
    expr: Expr
    rel: str
    rhs: float

    kind = "lin"


@dataclass
class QuadCon:
    """Convex quadratic row ``lhs <= rhs`` with affine rhs.

    Convexity (diagonal nonnegative quadratic part) is checked by
    ``canonicalize``, which lowers every such row to a second-order cone.
    """

    name: str
    tag: str
    lhs: Expr
    rhs: Expr

    kind = "quad"


@dataclass
class SocCon:
    """Second-order cone row ``norm(vector...) <= bound`` of affine pieces."""

    name: str
    tag: str
    vector: list[Expr]
    bound: Expr

    kind = "soc"


@dataclass
class QuadEqCon:
    """Nonconvex quadratic equality, produced only while assembling.

    These rows never reach the text format; they exist so the raw physical
    model can be held in memory until the convexification pass replaces them.
    """

    name: str
    tag: str
    lhs: Expr
    rhs: Expr

    kind = "quadeq"


Constraint = LinearCon | QuadCon | SocCon | QuadEqCon


@dataclass(frozen=True)
class MinMaxIntent:
    """Marker for a min-max objective awaiting its epigraph reformulation."""

    kind: str  # voltage_deviation | branch_power
    t_hat: int = 0


@dataclass
class Model:
    name: str
    horizon_T: int
    horizon_dt: float
    variables: dict[str, Var] = field(default_factory=dict)
    constraints: list[Constraint] = field(default_factory=list)
    objective: Expr = field(default_factory=Expr)
    minmax_intent: MinMaxIntent | None = None

    def add_var(self, var: Var) -> None:
        existing = self.variables.get(var.name)
        if existing is not None and existing != var:
            raise ModelValidationError(
                f"variable {var.name!r} declared twice with different attributes"
            )
        self.variables.setdefault(var.name, var)

    def add_con(self, con: Constraint) -> None:
        self.constraints.append(con)

    def constraint_names(self) -> set[str]:
        return {c.name for c in self.constraints}

    def copy(self) -> "Model":
        m = Model(self.name, self.horizon_T, self.horizon_dt)
        m.variables = dict(self.variables)
        m.objective = self.objective.copy()
        m.minmax_intent = self.minmax_intent
        for con in self.constraints:
            if isinstance(con, LinearCon):
                m.add_con(LinearCon(con.name, con.tag, con.expr.copy(), con.rel, con.rhs))
            elif isinstance(con, QuadCon):
                m.add_con(QuadCon(con.name, con.tag, con.lhs.copy(), con.rhs.copy()))
            elif isinstance(con, SocCon):
                m.add_con(SocCon(con.name, con.tag, [e.copy() for e in con.vector], con.bound.copy()))
            else:
                m.add_con(QuadEqCon(con.name, con.tag, con.lhs.copy(), con.rhs.copy()))
        return m


def validate_model(model: Model) -> list[str]:
    """Return invariant violations (empty when the model is well formed)."""
    problems: list[str] = []
    if model.horizon_T < 1:
        problems.append(f"horizon T must be >= 1, got {model.horizon_T}")
    if not model.horizon_dt > 0:
        problems.append(f"horizon dt must be positive, got {model.horizon_dt}")
    for var in model.variables.values():
        if var.kind not in ("cont", "bin"):
            problems.append(f"variable {var.name}: unknown kind {var.kind!r}")
        if var.lb > var.ub:
            problems.append(f"variable {var.name}: lb {var.lb} exceeds ub {var.ub}")
        if var.kind == "bin" and (var.lb < 0.0 or var.ub > 1.0):
            problems.append(f"variable {var.name}: binary bounds must lie within [0, 1]")
    seen: set[str] = set()
    for con in model.constraints:
        if con.name in seen:
            problems.append(f"constraint name {con.name!r} is not unique")
        seen.add(con.name)
        if con.tag not in COMPONENTS:
            problems.append(f"constraint {con.name}: unknown component tag {con.tag!r}")
        for ref in _constraint_variables(con):
            if ref not in model.variables:
                problems.append(f"constraint {con.name}:undeclared variable {ref!r}")
        if isinstance(con, LinearCon):
            if not con.expr.is_affine:
                problems.append(f"constraint {con.name}: quadratic term in linear row")
            if con.rel not in ("<=", "=", ">="):
                problems.append(f"constraint {con.name}: bad relation {con.rel!r}")
        elif isinstance(con, QuadCon):
            if not con.rhs.is_affine:
                problems.append(f"constraint {con.name}: quadratic right-hand side")
        elif isinstance(con, SocCon):
            if not con.bound.is_affine or any(not e.is_affine for e in con.vector):
                problems.append(f"constraint {con.name}: cone pieces must be affine")
            if not con.vector:
                problems.append(f"constraint {con.name}: empty cone vector")
    for ref in model.objective.variables():
        if ref not in model.variables:
            problems.append(f"objective references undeclared variable {ref!r}")
    return problems


def _constraint_variables(con: Constraint) -> set[str]:
    if isinstance(con, LinearCon):
        return con.expr.variables()
    if isinstance(con, (QuadCon, QuadEqCon)):
        return con.lhs.variables() | con.rhs.variables()
    names = con.bound.variables()
    for e in con.vector:
        names |= e.variables()
    return names


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------


def format_number(x: float) -> str:
    """Shortest exact decimal for x; integral values print without a dot."""
    if x == INF:
        return "+inf"
    if x == -INF:
        return "-inf"
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def _format_term(coef: float, names: tuple[str, ...], first: bool) -> str:
    sign = "-" if coef < 0 else "+"
    mag = abs(coef)
    if names and mag == 1.0:
        body = "*".join(names)
    elif names:
        body = format_number(mag) + "*" + "*".join(names)
    else:
        body = format_number(mag)
    if first:
        return body if sign == "+" else "-" + body
    return f"{sign} {body}"


def format_expr(expr: Expr) -> str:
    """Deterministic rendering; returns "0" for the empty expression."""
    e = expr.cleaned()
    parts: list[str] = []
    for name in sorted(e.linear):
        parts.append((e.linear[name], (name,)))
    for a, b in sorted(e.quad):
        parts.append((e.quad[(a, b)], (a, b)))
    if e.constant != 0.0:
        parts.append((e.constant, ()))
    if not parts:
        return "0"
    out = [_format_term(coef, names, i == 0) for i, (coef, names) in enumerate(parts)]
    return " ".join(out)


def print_model(model: Model) -> str:
    """Render a model in the text format.

    The output is canonical for whatever ordering the model carries: callers
    wanting byte-stable output across semantically equal models should
    ``canonicalize`` first.  Nonconvex rows and pending min-max intents have no
    textual form and raise.
    """
    problems = validate_model(model)
    if problems:
        raise ModelValidationError("; ".join(problems))
    if model.minmax_intent is not None:
        raise ModelValidationError("model carries an unconvexified min-max objective")
    lines = [f"problem {model.name}"]
    lines.append(f"horizon T={model.horizon_T} dt={format_number(model.horizon_dt)}")
    for name in sorted(model.variables):
        var = model.variables[name]
        line = (
            f"var {var.name} kind={var.kind} lb={format_number(var.lb)} "
            f"ub={format_number(var.ub)}"
        )
        if var.tag is not None:
            line += f" tag={var.tag}"
        lines.append(line)
    lines.append(f"min: {format_expr(model.objective)}")
    for con in sorted(model.constraints, key=lambda c: (_COMPONENT_RANK[c.tag], c.name)):
        if isinstance(con, LinearCon):
            folded = con.expr.cleaned()
            rhs = con.rhs - folded.constant
            folded.constant = 0.0
            lines.append(
                f"lin {con.name} tag={con.tag}: {format_expr(folded)} {con.rel} "
                f"{format_number(rhs)}"
            )
        elif isinstance(con, QuadCon):
            lines.append(
                f"quad {con.name} tag={con.tag}: {format_expr(con.lhs)} <= "
                f"{format_expr(con.rhs)}"
            )
        elif isinstance(con, SocCon):
            inner = ", ".join(format_expr(e) for e in con.vector)
            lines.append(
                f"soc {con.name} tag={con.tag}: norm({inner}) <= {format_expr(con.bound)}"
            )
        else:
            raise ModelValidationError(
                f"constraint {con.name}: nonconvex rows have no textual form; convexify first"
            )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_NUMBER_RE = re.compile(r"[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?")


class _LineScanner:
    """Cursor over one logical line with column tracking for errors."""

    def __init__(self, text: str, lineno: int) -> None:
        self.text = text
        self.lineno = lineno
        self.pos = 0

    def error(self, message: str) -> ModelSyntaxError:
        return ModelSyntaxError(message, self.lineno, self.pos + 1)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self, literal: str) -> None:
        self.skip_ws()
        if not self.text.startswith(literal, self.pos):
            raise self.error(f"expected {literal!r}")
        self.pos += len(literal)

    def try_take(self, literal: str) -> bool:
        self.skip_ws()
        if self.text.startswith(literal, self.pos):
            self.pos += len(literal)
            return True
        return False

    def ident(self) -> str:
        self.skip_ws()
        m = IDENT_RE.match(self.text, self.pos)
        if not m:
            raise self.error("expected identifier")
        self.pos = m.end()
        return m.group(0)

    def number(self) -> float:
        self.skip_ws()
        if self.text.startswith(("+inf", "-inf"), self.pos):
            sign = 1.0 if self.text[self.pos] == "+" else -1.0
            self.pos += 4
            return sign * INF
        if self.text.startswith("inf", self.pos):
            self.pos += 3
            return INF
        m = _NUMBER_RE.match(self.text, self.pos)
        if not m:
            raise self.error("expected number")
        self.pos = m.end()
        return float(m.group(0))

    def relation(self) -> str:
        self.skip_ws()
        for rel in ("<=", ">=", "="):
            if self.text.startswith(rel, self.pos):
                self.pos += len(rel)
                return rel
        raise self.error("expected relation (<=, = or >=)")


def _parse_expr(scan: _LineScanner, stop: tuple[str, ...] = ()) -> Expr:
    """Parse a signed sum of terms, stopping before any literal in ``stop``."""
    expr = Expr()
    first = True
    while True:
        scan.skip_ws()
        if scan.at_end():
            break
        if any(scan.text.startswith(s, scan.pos) for s in stop):
            break
        sign = 1.0
        if scan.try_take("+"):
            sign = 1.0
        elif scan.try_take("-"):
            sign = -1.0
        elif not first:
            raise scan.error("expected + or - between terms")
        scan.skip_ws()
        ch = scan.peek()
        if ch and (ch.isdigit() or ch == "."):
            coef = sign * scan.number()
            if scan.try_take("*"):
                a = scan.ident()
                if scan.try_take("*"):
                    b = scan.ident()
                    expr.add_quad(a, b, coef)
                else:
                    expr.add(a, coef)
            else:
                expr.add_const(coef)
        elif ch and IDENT_RE.match(ch):
            a = scan.ident()
            if scan.try_take("*"):
                b = scan.ident()
                expr.add_quad(a, b, sign)
            else:
                expr.add(a, sign)
        else:
            raise scan.error("expected a term")
        first = False
    if first:
        raise scan.error("empty expression")
    return expr


def _parse_tag(scan: _LineScanner) -> str:
    scan.take("tag=")
    tag = scan.ident()
    if tag not in COMPONENTS:
        raise scan.error(f"unknown component tag {tag!r}")
    return tag


def parse_model(text: str) -> Model:
    """Parse the text format back into a ``Model``.

    Raises ``ModelSyntaxError`` with line/column on malformed input and
    ``ModelValidationError`` when the parsed model breaks an invariant
    (undeclared variable, duplicate names, binary bounds outside [0, 1]).
    """
    model: Model | None = None
    saw_horizon = False
    saw_objective = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        scan = _LineScanner(line, lineno)
        head = scan.ident()
        if head == "problem":
            if model is not None:
                raise scan.error("duplicate problem line")
            model = Model(scan.ident(), 0, 0.0)
        elif model is None:
            raise scan.error("first directive must be 'problem'")
        elif head == "horizon":
            if saw_horizon:
                raise scan.error("duplicate horizon line")
            scan.take("T=")
            t_val = scan.number()
            if t_val != int(t_val):
                raise scan.error("horizon T must be an integer")
            scan.take("dt=")
            model.horizon_T = int(t_val)
            model.horizon_dt = scan.number()
            saw_horizon = True
        elif head == "var":
            name = scan.ident()
            if name in model.variables:
                raise scan.error(f"variable {name!r} declared twice")
            scan.take("kind=")
            kind = scan.ident()
            if kind not in ("cont", "bin"):
                raise scan.error(f"unknown variable kind {kind!r}")
            scan.take("lb=")
            lb = scan.number()
            scan.take("ub=")
            ub = scan.number()
            tag: str | None = None
            if not scan.at_end():
                tag = _parse_tag(scan)
            if not scan.at_end():
                raise scan.error("trailing input after variable declaration")
            model.variables[name] = Var(name, kind, lb, ub, tag)
        elif head == "min":
            scan.take(":")
            if saw_objective:
                raise scan.error("duplicate objective")
            model.objective = _parse_expr(scan)
            saw_objective = True
        elif head in ("lin", "quad", "soc"):
            name = scan.ident()
            tag = _parse_tag(scan)
            scan.take(":")
            if head == "lin":
                expr = _parse_expr(scan, stop=("<=", ">=", "="))
                rel = scan.relation()
                rhs = scan.number()
                if not scan.at_end():
                    raise scan.error("trailing input after linear row")
                if not expr.is_affine:
                    raise scan.error("quadratic term in linear row")
                model.add_con(LinearCon(name, tag, expr, rel, rhs))
            elif head == "quad":
                lhs = _parse_expr(scan, stop=("<=",))
                scan.take("<=")
                rhs = _parse_expr(scan)
                if not rhs.is_affine:
                    raise scan.error("quadratic right-hand side")
                model.add_con(QuadCon(name, tag, lhs, rhs))
            else:
                scan.take("norm(")
                vector = [_parse_expr(scan, stop=(",", ")"))]
                while scan.try_take(","):
                    vector.append(_parse_expr(scan, stop=(",", ")")))
                scan.take(")")
                scan.take("<=")
                bound = _parse_expr(scan)
                for piece in vector + [bound]:
                    if not piece.is_affine:
                        raise scan.error("cone pieces must be affine")
                model.add_con(SocCon(name, tag, vector, bound))
        else:
            raise ModelSyntaxError(f"unknown directive {head!r}", lineno, 1)
    if model is None:
        raise ModelSyntaxError("empty input: missing problem line", 1, 1)
    if not saw_horizon:
        raise ModelSyntaxError("missing horizon line", 1, 1)
    if not saw_objective:
        raise ModelSyntaxError("missing objective", 1, 1)
    problems = validate_model(model)
    if problems:
        raise ModelValidationError("; ".join(problems))
    return model


# ---------------------------------------------------------------------------
# fragments: constraint/variable subsets without the problem envelope
# ---------------------------------------------------------------------------


@dataclass
class Fragment:
    """Parsed slice of a model: declarations, rows and at most one objective."""

    variables: list[Var] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    objective: Expr | None = None


def parse_fragment(text: str) -> Fragment:
    """Parse ``var``/``min:``/row lines without requiring a problem header."""
    frag = Fragment()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        scan = _LineScanner(line, lineno)
        head = scan.ident()
        if head in ("problem", "horizon"):
            continue  # tolerated so full scripts also parse as fragments
        kind, payload = _parse_fragment_line(line, lineno)
        if kind == "var":
            frag.variables.append(payload)
        elif kind == "min":
            if frag.objective is not None:
                raise ModelSyntaxError("duplicate objective in fragment", lineno, 1)
            frag.objective = payload
        else:
            frag.constraints.append(payload)
    return frag


def _parse_fragment_line(line: str, lineno: int):
    """Parse one fragment line into (kind, payload)."""
    scan = _LineScanner(line, lineno)
    head = scan.ident()
    if head == "var":
        name = scan.ident()
        scan.take("kind=")
        kind = scan.ident()
        if kind not in ("cont", "bin"):
            raise scan.error(f"unknown variable kind {kind!r}")
        scan.take("lb=")
        lb = scan.number()
        scan.take("ub=")
        ub = scan.number()
        tag = None
        if not scan.at_end():
            tag = _parse_tag(scan)
        return ("var", Var(name, kind, lb, ub, tag))
    if head == "min":
        scan.take(":")
        return ("min", _parse_expr(scan))
    if head == "lin":
        name = scan.ident()
        tag = _parse_tag(scan)
        scan.take(":")
        expr = _parse_expr(scan, stop=("<=", ">=", "="))
        rel = scan.relation()
        rhs = scan.number()
        return ("lin", LinearCon(name, tag, expr, rel, rhs))
    if head == "quad":
        name = scan.ident()
        tag = _parse_tag(scan)
        scan.take(":")
        lhs = _parse_expr(scan, stop=("<=",))
        scan.take("<=")
        rhs = _parse_expr(scan)
        return ("quad", QuadCon(name, tag, lhs, rhs))
    if head == "soc":
        name = scan.ident()
        tag = _parse_tag(scan)
        scan.take(":")
        scan.take("norm(")
        vector = [_parse_expr(scan, stop=(",", ")"))]
        while scan.try_take(","):
            vector.append(_parse_expr(scan, stop=(",", ")")))
        scan.take(")")
        scan.take("<=")
        bound = _parse_expr(scan)
        return ("soc", SocCon(name, tag, vector, bound))
    if head == "quadeq":
        # exact quadratic equalities exist only at the fragment level; full
        # scripts must be convexified before they print or parse
        name = scan.ident()
        tag = _parse_tag(scan)
        scan.take(":")
        lhs = _parse_expr(scan, stop=("=",))
        scan.take("=")
        rhs = _parse_expr(scan)
        return ("quadeq", QuadEqCon(name, tag, lhs, rhs))
    raise ModelSyntaxError(f"unknown directive {head!r}", lineno, 1)


def render_fragment(fragment: Fragment) -> str:
    """Render a fragment in the text format, including exact quadratic rows.

    Inverse of ``parse_fragment`` up to ordering: declarations sort by name,
    rows by (component, name), matching ``print_model``.
    """
    lines: list[str] = []
    for var in sorted(fragment.variables, key=lambda v: v.name):
        line = (
            f"var {var.name} kind={var.kind} lb={format_number(var.lb)} "
            f"ub={format_number(var.ub)}"
        )
        if var.tag is not None:
            line += f" tag={var.tag}"
        lines.append(line)
    if fragment.objective is not None:
        lines.append(f"min: {format_expr(fragment.objective)}")
    for con in sorted(fragment.constraints, key=lambda c: (_COMPONENT_RANK[c.tag], c.name)):
        if isinstance(con, LinearCon):
            folded = con.expr.cleaned()
            rhs = con.rhs - folded.constant
            folded.constant = 0.0
            lines.append(
                f"lin {con.name} tag={con.tag}: {format_expr(folded)} {con.rel} "
                f"{format_number(rhs)}"
            )
        elif isinstance(con, QuadCon):
            lines.append(
                f"quad {con.name} tag={con.tag}: {format_expr(con.lhs)} <= "
                f"{format_expr(con.rhs)}"
            )
        elif isinstance(con, SocCon):
            inner = ", ".join(format_expr(e) for e in con.vector)
            lines.append(f"soc {con.name} tag={con.tag}: norm({inner}) <= {format_expr(con.bound)}")
        else:
            lines.append(
                f"quadeq {con.name} tag={con.tag}: {format_expr(con.lhs)} = "
                f"{format_expr(con.rhs)}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# canonicalization
# ---------------------------------------------------------------------------


def _lower_quad_con(con: QuadCon, model: Model) -> SocCon:
    """Rewrite a convex quadratic row as a second-order cone row.

    ``sum a_k x_k^2 + linear + const <= rhs`` with a_k > 0 becomes, after
    completing the square per variable and moving stray linear terms right,
    ``norm(2*sqrt(a_k)*(x_k + d_k), s - 1) <= s + 1`` with affine slack s.
    When the completed left side is a bare sum of squares against a constant
    bound, the plain ``norm(...) <= sqrt(bound)`` form is used instead.
    """
    lhs = con.lhs.cleaned()
    rhs = con.rhs.cleaned()
    squares: dict[str, float] = {}
    for (a, b), coef in lhs.quad.items():
        if a != b:
            raise ModelValidationError(
                f"constraint {con.name}: non-convex quadratic (cross term {a}*{b})"
            )
        if coef <= 0.0:
            raise ModelValidationError(
                f"constraint {con.name}: non-convex quadratic (nonpositive square {a})"
            )
        squares[a] = coef
    # slack s = rhs - leftover linear/constant parts after completing squares
    s = Expr()
    s.add_expr(rhs)
    shift = 0.0
    legs: list[Expr] = []
    for name in sorted(squares):
        a = squares[name]
        b = lhs.linear.get(name, 0.0)
        d = b / (2.0 * a)
        shift += a * d * d
        leg = Expr.term(name, 2.0 * math.sqrt(a))
        leg.add_const(2.0 * math.sqrt(a) * d)
        legs.append(leg)
    for name, b in lhs.linear.items():
        if name not in squares and b != 0.0:
            s.add(name, -b)
    s.add_const(shift - lhs.constant)
    s = s.cleaned()
    plain = (
        s.is_constant
        and s.constant >= 0.0
        and all(leg.constant == 0.0 for leg in legs)
    )
    if plain:
        vector = [Expr.term(name, math.sqrt(squares[name])) for name in sorted(squares)]
        return SocCon(con.name, con.tag, vector, Expr.const(math.sqrt(s.constant)))
    vector = legs + [s.copy().add_const(-1.0)]
    bound = s.copy().add_const(1.0)
    return SocCon(con.name, con.tag, vector, bound)


def canonicalize(model: Model) -> Model:
    """Return the normalized, solver-ready form of a model.

    Duplicate terms merge, exact zeros drop, every convex quadratic row
    lowers to a second-order cone, a quadratic objective gains per-variable
    epigraphs, and variables/constraints take their canonical order.  The
    pass is idempotent and raises on nonconvex content.
    """
    problems = validate_model(model)
    if problems:
        raise ModelValidationError("; ".join(problems))
    if model.minmax_intent is not None:
        raise ModelValidationError("model carries an unconvexified min-max objective")
    out = Model(model.name, model.horizon_T, model.horizon_dt)
    out.variables = dict(model.variables)
    objective = model.objective.cleaned()
    new_cons: list[Constraint] = []

    for (a, b), coef in sorted(objective.quad.items()):
        if a != b:
            raise ModelValidationError(
                f"objective: non-convex quadratic (cross term {a}*{b})"
            )
        if coef <= 0.0:
            raise ModelValidationError(
                f"objective: non-convex quadratic (nonpositive square {a})"
            )
    if objective.quad:
        linear_part = Expr(objective.constant, dict(objective.linear))
        for (a, _b), coef in sorted(objective.quad.items()):
            epi = f"epi_{a}"
            if epi in out.variables:
                raise ModelValidationError(
                    f"epigraph name {epi!r} collides with a declared variable"
                )
            out.variables[epi] = Var(epi, "cont", 0.0, INF, "objective")
            lhs = Expr(quad={(a, a): coef})
            new_cons.append(QuadCon(f"obj.epi.{a}", "objective", lhs, Expr.term(epi)))
            linear_part.add(epi, 1.0)
        objective = linear_part.cleaned()
    out.objective = objective

    for con in model.constraints:
        if isinstance(con, QuadEqCon):
            raise ModelValidationError(
                f"constraint {con.name}: non-convex quadratic equality; convexify first"
            )
        if isinstance(con, LinearCon):
            folded = con.expr.cleaned()
            rhs = con.rhs - folded.constant
            folded.constant = 0.0
            new_cons.append(LinearCon(con.name, con.tag, folded, con.rel, rhs))
        elif isinstance(con, QuadCon):
            new_cons.append(con)
        else:
            vector = sorted((e.cleaned() for e in con.vector), key=format_expr)
            new_cons.append(SocCon(con.name, con.tag, vector, con.bound.cleaned()))

    lowered: list[Constraint] = []
    for con in new_cons:
        if isinstance(con, QuadCon):
            soc = _lower_quad_con(QuadCon(con.name, con.tag, con.lhs.cleaned(), con.rhs.cleaned()), out)
            soc.vector = sorted((e.cleaned() for e in soc.vector), key=format_expr)
            lowered.append(soc)
        else:
            lowered.append(con)
    lowered.sort(key=lambda c: (_COMPONENT_RANK[c.tag], c.name))
    out.constraints = lowered
    out.variables = {name: out.variables[name] for name in sorted(out.variables)}
    problems = validate_model(out)
    if problems:
        raise ModelValidationError("; ".join(problems))
    return out


# ---------------------------------------------------------------------------
# component-wise structural diff
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentDiff:
    status: str  # match | partial | missing
    matched: int
    only_reference: int
    only_candidate: int


def _signature(con: Constraint) -> tuple:
    """Hashable shape of a row: kind, relation and the variables involved."""
    if isinstance(con, LinearCon):
        e = con.expr.cleaned()
        return ("lin", con.rel, tuple(sorted(e.linear)))
    if isinstance(con, QuadCon):
        l, r = con.lhs.cleaned(), con.rhs.cleaned()
        return ("quad", tuple(sorted(l.linear)), tuple(sorted(l.quad)), tuple(sorted(r.linear)))
    if isinstance(con, SocCon):
        legs = tuple(sorted(tuple(sorted(e.cleaned().linear)) for e in con.vector))
        return ("soc", len(con.vector), legs, tuple(sorted(con.bound.cleaned().linear)))
    l, r = con.lhs.cleaned(), con.rhs.cleaned()
    return ("quadeq", tuple(sorted(l.linear)), tuple(sorted(l.quad)), tuple(sorted(r.quad)))


def _coef_vector(con: Constraint) -> tuple[float, ...]:
    if isinstance(con, LinearCon):
        e = con.expr.cleaned()
        return tuple(e.linear[k] for k in sorted(e.linear)) + (con.rhs - e.constant,)
    if isinstance(con, (QuadCon, QuadEqCon)):
        l, r = con.lhs.cleaned(), con.rhs.cleaned()
        vals = [l.constant, r.constant]
        vals += [l.linear[k] for k in sorted(l.linear)]
        vals += [l.quad[k] for k in sorted(l.quad)]
        vals += [r.linear[k] for k in sorted(r.linear)]
        vals += [r.quad[k] for k in sorted(r.quad)] if isinstance(con, QuadEqCon) else []
        return tuple(vals)
    vals = []
    for e in sorted((e.cleaned() for e in con.vector), key=format_expr):
        vals.append(e.constant)
        vals += [e.linear[k] for k in sorted(e.linear)]
    b = con.bound.cleaned()
    vals.append(b.constant)
    vals += [b.linear[k] for k in sorted(b.linear)]
    return tuple(vals)


def _match_component(ref: list[Constraint], cand: list[Constraint], tol: float) -> tuple[int, int, int]:
    """Greedy tolerance-aware multiset matching; returns (matched, ref-only, cand-only)."""
    buckets: dict[tuple, list[tuple[tuple[float, ...], bool]]] = {}
    cand_by_sig: dict[tuple, list[tuple[float, ...]]] = {}
    for con in cand:
        cand_by_sig.setdefault(_signature(con), []).append(_coef_vector(con))
    matched = 0
    ref_only = 0
    for con in ref:
        sig = _signature(con)
        vec = _coef_vector(con)
        pool = cand_by_sig.get(sig, [])
        hit = None
        for i, other in enumerate(pool):
            if len(other) == len(vec) and all(abs(a - b) <= tol for a, b in zip(vec, other)):
                hit = i
                break
        if hit is None:
            ref_only += 1
        else:
            pool.pop(hit)
            matched += 1
    cand_only = sum(len(v) for v in cand_by_sig.values())
    return matched, ref_only, cand_only


def _bound_finite_equal(a: float, b: float, tol: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= tol


def _match_vars(ref: list[Var], cand: list[Var], tol: float) -> tuple[int, int, int]:
    """Name-keyed declaration matching: kind and both bounds within tol."""
    cand_by_name = {v.name: v for v in cand}
    matched = 0
    ref_only = 0
    for var in ref:
        other = cand_by_name.pop(var.name, None)
        if (
            other is not None
            and other.kind == var.kind
            and _bound_finite_equal(var.lb, other.lb, tol)
            and _bound_finite_equal(var.ub, other.ub, tol)
        ):
            matched += 1
        else:
            ref_only += 1
    return matched, ref_only, len(cand_by_name)


def diff_components(
    reference: Model, candidate: Model, tol: float = 1e-9
) -> dict[str, ComponentDiff]:
    """Compare two models component by component.

    Each component's item set is its tagged variable declarations (device
    operating boxes live in bounds) plus its tagged rows; the objective
    component additionally carries the objective expression as one item.
    Rows pair when their shape (kind, relation, variable names, following the
    shared naming convention) agrees and every coefficient agrees within
    ``tol``; declarations pair by name when kind and bounds agree.  A
    component is ``match`` when both sides pair completely, ``partial`` when
    at least one item pairs, and ``missing`` otherwise.
    """
    result: dict[str, ComponentDiff] = {}
    for component in COMPONENTS:
        ref_rows = [c for c in reference.constraints if c.tag == component]
        cand_rows = [c for c in candidate.constraints if c.tag == component]
        matched, ref_only, cand_only = _match_component(ref_rows, cand_rows, tol)
        vm, vr, vc = _match_vars(
            [v for v in reference.variables.values() if v.tag == component],
            [v for v in candidate.variables.values() if v.tag == component],
            tol,
        )
        matched += vm
        ref_only += vr
        cand_only += vc
        if component == "objective":
            if expr_equal(reference.objective, candidate.objective, tol):
                matched += 1
            else:
                ref_only += 1
                cand_only += 1
        if ref_only == 0 and cand_only == 0:
            status = "match"
        elif matched > 0:
            status = "partial"
        else:
            status = "missing"
        result[component] = ComponentDiff(status, matched, ref_only, cand_only)
    return result


def models_equivalent(a: Model, b: Model, tol: float = 1e-9) -> bool:
    """True when every component matches and the horizons agree."""
    if (a.horizon_T, a.horizon_dt) != (b.horizon_T, b.horizon_dt):
        return False
    return all(d.status == "match" for d in diff_components(a, b, tol).values())
