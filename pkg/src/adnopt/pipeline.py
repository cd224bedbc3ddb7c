"""Three-stage pipeline turning dispatch requests into solved strategies.

Stage one extracts structured requirements from the request text, stage two
builds the optimization model across six dialogue rounds, stage three emits
the final model script and checks that it is executable (parse, canonicalize,
solve).  Each stage can run against a live chat endpoint, a recorded replay
transcript, or the deterministic reference path that bypasses language models
entirely and delegates to the formulator.

Ablations switch individual stages or prompt sections off so their
contribution can be measured.  In reference mode the wiring ablations only
mark trace stages as skipped; the reference artifacts are still produced,
since there is no generation step whose absence could degrade them.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib.resources import files as _pkg_files
from typing import Callable, Protocol

import httpx

from .cases import NetworkCase, baseline_power_flow, load_case, snapshot_at
from .formulator import (
    FormulationError,
    assemble,
    build_additional,
    build_equipment,
    build_objective,
    build_power_flow,
    convexify,
    make_context,
)
from .modelir import (
    Fragment,
    Model,
    ModelError,
    canonicalize,
    format_number,
    parse_fragment,
    parse_model,
    print_model,
    render_fragment,
)
from .requirements import (
    Catalog,
    RequirementsError,
    StructuredRequirements,
    load_catalog,
    parse_decorated,
    render_decorated,
    validate_requirements,
)
from .solver import (
    SolveOptions,
    Solution,
    check_tightness,
    extract_strategy,
    solve_misocp,
)

EMBED_DIM = 1024
DEFAULT_TEMPERATURE = 0.6
DEFAULT_TOP_P = 0.7

MODES = ("reference", "llm", "replay")
ABLATIONS = ("full", "no_ie", "no_pf", "no_iepf", "no_ek", "no_fs", "no_rag")
AGENTS = ("extractor", "formulator", "programmer")
SECTION_ORDER = ("role", "task", "environment", "output_format", "few_shot", "cot")
_SECTION_TITLES = {
    "role": "Role",
    "task": "Task",
    "environment": "Environment",
    "output_format": "Output format",
    "few_shot": "Examples",
    "cot": "Reasoning guidance",
}

FORMULATION_ROUNDS = (
    "objective",
    "equipment",
    "power_flow",
    "additional",
    "assembly",
    "convexification",
)


class PipelineError(RuntimeError):
    """A pipeline stage failed in a way that terminates the run."""


class ChatError(PipelineError):
    """Chat transport, protocol, or transcript error."""


# ---------------------------------------------------------------------------
# chat clients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    seed: int | None = None


def prompt_hash(messages: list[ChatMessage]) -> str:
    """Stable digest of an ordered message list, used to key transcripts."""
    doc = [{"role": m.role, "content": m.content} for m in messages]
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ChatClient(Protocol):
    def complete(self, messages: list[ChatMessage], params: GenerationParams) -> str: ...


class HttpChatClient:
    """Client for a hosted chat-completion endpoint.

    Endpoint and credential come from the environment (ADN_CHAT_ENDPOINT,
    ADN_CHAT_KEY) unless given explicitly.  The credential lives only in this
    object and the request headers; it is never written into traces.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        max_retries: int = 2,
    ) -> None:
        self.endpoint = endpoint or os.environ.get("ADN_CHAT_ENDPOINT")
        if not self.endpoint:
            raise ChatError("no chat endpoint configured (set ADN_CHAT_ENDPOINT)")
        self._api_key = api_key if api_key is not None else os.environ.get("ADN_CHAT_KEY")
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries

    def complete(self, messages: list[ChatMessage], params: GenerationParams) -> str:
        payload: dict = {
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "top_p": params.top_p,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        if self.model:
            payload["model"] = self.model
        headers = {}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        last_exc: Exception | None = None
        for _ in range(self.max_retries + 1):
            try:
                resp = httpx.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise ChatError(f"chat endpoint returned HTTP {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise ChatError(f"malformed chat response: {exc}") from exc
        raise ChatError(f"chat endpoint unreachable after {self.max_retries + 1} attempts: {last_exc}")


class ReplayChatClient:
    """Replays a recorded transcript, verifying each prompt hash in order."""

    def __init__(self, records: list[dict]) -> None:
        for i, rec in enumerate(records):
            if "prompt_hash" not in rec or "response" not in rec:
                raise ChatError(f"transcript record {i} lacks prompt_hash/response")
        self.records = records
        self.cursor = 0

    @staticmethod
    def from_document(text: str) -> "ReplayChatClient":
        return ReplayChatClient(json.loads(text))

    def complete(self, messages: list[ChatMessage], params: GenerationParams) -> str:
        if self.cursor >= len(self.records):
            raise ChatError(
                f"replay transcript exhausted after {len(self.records)} exchanges"
            )
        rec = self.records[self.cursor]
        got = prompt_hash(messages)
        if rec["prompt_hash"] != got:
            raise ChatError(
                f"replay prompt mismatch at exchange {self.cursor}: "
                f"transcript has {rec['prompt_hash'][:16]}..., live prompt is {got[:16]}..."
            )
        self.cursor += 1
        return rec["response"]


class ScriptedChatClient:
    """Returns canned responses in order; for tests that skip hash checking."""

    def __init__(self, responses: list[str]) -> None:
        self.responses = list(responses)
        self.prompts: list[list[ChatMessage]] = []

    def complete(self, messages: list[ChatMessage], params: GenerationParams) -> str:
        self.prompts.append(messages)
        if not self.responses:
            raise ChatError("scripted client ran out of responses")
        return self.responses.pop(0)


# ---------------------------------------------------------------------------
# bundled assets
# ---------------------------------------------------------------------------


def asset_text(relpath: str) -> str:
    node = _pkg_files("adnopt").joinpath("data")
    for part in relpath.split("/"):
        node = node.joinpath(part)
    return node.read_text(encoding="utf-8")


def bundled_catalog() -> Catalog:
    return load_catalog(asset_text("catalog.json"))


def bundled_case(case_file: str) -> NetworkCase:
    return load_case(asset_text(f"cases/{case_file}"))


def case_for_district(district: str, catalog: Catalog | None = None) -> NetworkCase:
    catalog = catalog or bundled_catalog()
    if district not in catalog.districts:
        raise PipelineError(f"unknown district {district!r}")
    return bundled_case(catalog.districts[district].case_file)


def bundled_requests() -> list[dict]:
    return json.loads(asset_text("requests.json"))


# ---------------------------------------------------------------------------
# prompt assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PromptBundle:
    """Six addressable prompt sections, in fixed order, blankable per ablation."""

    sections: tuple[tuple[str, str], ...]

    def section(self, name: str) -> str:
        for key, text in self.sections:
            if key == name:
                return text
        raise KeyError(name)

    def render(self) -> str:
        parts = []
        for key, text in self.sections:
            if text.strip():
                parts.append(f"## {_SECTION_TITLES[key]}\n{text.strip()}")
        return "\n\n".join(parts)


def catalog_environment_text(catalog: Catalog) -> str:
    lines = ["Known districts:"]
    for name in catalog.district_names():
        d = catalog.districts[name]
        syn = ", ".join(d.synonyms) if d.synonyms else "none"
        lines.append(f"- {name}: {d.description} (also called: {syn})")
    lines.append("Objectives: " + ", ".join(sorted(set(catalog.objective_synonyms.values()))))
    lines.append("Equipment kinds: " + ", ".join(sorted(set(catalog.equipment_synonyms.values()))))
    lines.append("Constraint kinds: " + ", ".join(sorted(set(catalog.constraint_synonyms.values()))))
    if catalog.environment_notes:
        lines.append(catalog.environment_notes)
    return "\n".join(lines)


def assemble_prompt(
    agent: str,
    catalog: Catalog,
    ablation: str = "full",
    few_shot: tuple[str, ...] = (),
    environment_extra: str = "",
) -> PromptBundle:
    """Build the six-section prompt for one agent under one ablation."""
    if agent not in AGENTS:
        raise PipelineError(f"unknown agent {agent!r}")
    if ablation not in ABLATIONS:
        raise PipelineError(f"unknown ablation {ablation!r}")
    role = asset_text(f"prompts/{agent}/role.txt")
    task = asset_text(f"prompts/{agent}/task.txt")
    output_format = asset_text(f"prompts/{agent}/output_format.txt")
    cot = asset_text(f"prompts/{agent}/cot.txt")
    environment = catalog_environment_text(catalog)
    if environment_extra:
        environment = environment + "\n\n" + environment_extra
    if ablation == "no_ek":
        environment = ""
    few = "\n\n".join(few_shot)
    if ablation == "no_fs":
        few = ""
    return PromptBundle(
        (
            ("role", role),
            ("task", task),
            ("environment", environment),
            ("output_format", output_format),
            ("few_shot", few),
            ("cot", cot),
        )
    )


# ---------------------------------------------------------------------------
# embeddings and retrieval
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9_.]+|[+\-*/^()=<>,|]")


class EmbedClient(Protocol):
    def embed(self, text: str) -> list[float]: ...


class HttpEmbedClient:
    """Client for a hosted embedding endpoint (ADN_EMBED_ENDPOINT)."""

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0) -> None:
        self.endpoint = endpoint or os.environ.get("ADN_EMBED_ENDPOINT")
        if not self.endpoint:
            raise ChatError("no embedding endpoint configured (set ADN_EMBED_ENDPOINT)")
        self.timeout = timeout

    def embed(self, text: str) -> list[float]:
        try:
            resp = httpx.post(self.endpoint, json={"input": text}, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise ChatError(f"embedding endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ChatError(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            return list(resp.json()["data"][0]["embedding"])
        except (KeyError, IndexError, ValueError) as exc:
            raise ChatError(f"malformed embedding response: {exc}") from exc


def embed_text(text: str, client: EmbedClient | None = None) -> list[float]:
    """Embed text, via the client when given, else the deterministic fallback.

    The fallback hashes normalized tokens into a bag-of-features vector of
    dimension EMBED_DIM and L2-normalizes it.  Empty input maps to the unit
    vector on index 0 so similarity stays defined.
    """
    if client is not None:
        vec = client.embed(text)
        if len(vec) != EMBED_DIM:
            raise PipelineError(f"embedding has dimension {len(vec)}, expected {EMBED_DIM}")
        return vec
    vec = [0.0] * EMBED_DIM
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        vec[0] = 1.0
        return vec
    for token in tokens:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:8], "big") % EMBED_DIM
        vec[idx] += 1.0
    norm = math.sqrt(sum(x * x for x in vec))
    return [x / norm for x in vec]


def cosine_similarity(a: list[float], b: list[float]) -> float:
    if len(a) != len(b):
        raise PipelineError(f"vector dimensions differ: {len(a)} vs {len(b)}")
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0.0 or nb == 0.0:
        raise PipelineError("cosine similarity is undefined for a zero-norm vector")
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


@dataclass(frozen=True)
class RagEntry:
    text: str
    vector: tuple[float, ...]
    exemplar: str


@dataclass
class RagStore:
    """Math-text entries with embeddings and model-script exemplars."""

    entries: list[RagEntry]
    dimension: int = EMBED_DIM

    def __post_init__(self) -> None:
        for i, entry in enumerate(self.entries):
            if len(entry.vector) != self.dimension:
                raise PipelineError(
                    f"store entry {i} has dimension {len(entry.vector)}, expected {self.dimension}"
                )
            if not all(math.isfinite(x) for x in entry.vector):
                raise PipelineError(f"store entry {i} has non-finite vector components")

    @staticmethod
    def from_document(text: str, client: EmbedClient | None = None) -> "RagStore":
        doc = json.loads(text)
        dimension = doc.get("dimension", EMBED_DIM)
        entries = []
        for raw in doc["entries"]:
            vector = raw.get("vector")
            if vector is None:
                vector = embed_text(raw["text"], client)
            entries.append(RagEntry(raw["text"], tuple(vector), raw["exemplar"]))
        return RagStore(entries, dimension)

    def fixed_exemplars(self, k: int = 3) -> list[RagEntry]:
        return self.entries[:k]


def bundled_ragstore(client: EmbedClient | None = None) -> RagStore:
    return RagStore.from_document(asset_text("raglib.json"), client)


def retrieve_examples(
    query: list[float], store: RagStore, k: int = 3
) -> list[tuple[RagEntry, float]]:
    """Top-k store entries by cosine similarity, ties broken by insertion order."""
    if not store.entries:
        raise PipelineError("retrieval from an empty store")
    if math.sqrt(sum(x * x for x in query)) == 0.0:
        raise PipelineError("cosine similarity is undefined for a zero-norm query")
    scored = [
        (cosine_similarity(query, list(entry.vector)), -i, entry)
        for i, entry in enumerate(store.entries)
    ]
    scored.sort(key=lambda item: (item[0], item[1]), reverse=True)
    return [(entry, sim) for sim, _, entry in scored[: min(k, len(scored))]]


# ---------------------------------------------------------------------------
# trace model
# ---------------------------------------------------------------------------


@dataclass
class StageRecord:
    stage: str  # extraction | formulation | code | solve | review
    status: str  # ok | skipped | error
    detail: str = ""
    prompts: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    round: int | None = None
    wall_time_ms: int = 0

    def to_document(self) -> dict:
        return {
            "stage": self.stage,
            "status": self.status,
            "detail": self.detail,
            "prompts": self.prompts,
            "outputs": self.outputs,
            "round": self.round,
            "wall_time_ms": self.wall_time_ms,
        }

    @staticmethod
    def from_document(doc: dict) -> "StageRecord":
        return StageRecord(
            doc["stage"], doc["status"], doc.get("detail", ""),
            list(doc.get("prompts", [])), list(doc.get("outputs", [])),
            doc.get("round"), doc.get("wall_time_ms", 0),
        )


@dataclass
class PipelineTrace:
    request: str
    mode: str
    ablation: str
    seed: int | None
    district: str | None = None
    stages: list[StageRecord] = field(default_factory=list)
    solve: dict | None = None
    error: str | None = None

    def to_document(self) -> dict:
        return {
            "request": self.request,
            "mode": self.mode,
            "ablation": self.ablation,
            "seed": self.seed,
            "district": self.district,
            "stages": [s.to_document() for s in self.stages],
            "solve": self.solve,
            "error": self.error,
        }

    @staticmethod
    def from_document(doc: dict) -> "PipelineTrace":
        return PipelineTrace(
            doc["request"], doc["mode"], doc["ablation"], doc.get("seed"),
            doc.get("district"),
            [StageRecord.from_document(s) for s in doc.get("stages", [])],
            doc.get("solve"), doc.get("error"),
        )


@dataclass
class PipelineResult:
    trace: PipelineTrace
    requirements: StructuredRequirements | None = None
    model: Model | None = None
    canonical: Model | None = None
    solution: Solution | None = None
    strategy: dict | None = None
    work_case: NetworkCase | None = None
    executable: bool = False

    @property
    def failed(self) -> bool:
        return self.trace.error is not None


# ---------------------------------------------------------------------------
# reference stage implementations
# ---------------------------------------------------------------------------


def _match_positions(text: str, table: dict[str, str], canonical: tuple[str, ...] = ()) -> list[tuple[int, int, str]]:
    """All (position, -length, canonical) word-boundary hits of synonyms/names."""
    hits = []
    vocab: dict[str, str] = {name: name for name in canonical}
    vocab.update(table)
    for phrase, target in vocab.items():
        for m in re.finditer(rf"(?<![a-z0-9_]){re.escape(phrase)}(?![a-z0-9_])", text):
            hits.append((m.start(), -len(phrase), target))
    return sorted(hits)


_TIMESTEP_RE = re.compile(r"(?<![a-z0-9_])(?:timestep|time step|step|hour|t)\s*[=#]?\s*(\d+)")


def reference_extract(request: str, catalog: Catalog) -> StructuredRequirements:
    """Deterministic requirements extraction via catalog phrase matching.

    The matched fields are rendered to decorated text and re-parsed, so this
    path exercises exactly the same normalization and validation as an
    upstream generation step would.
    """
    low = request.lower()

    district_hits = _match_positions(
        low,
        {syn.lower(): d.name for d in catalog.districts.values() for syn in d.synonyms},
        tuple(catalog.districts),
    )
    districts = {target for _, _, target in district_hits}
    if not districts:
        raise PipelineError("could not identify a district in the request")
    if len(districts) > 1:
        raise PipelineError(f"request names multiple districts: {', '.join(sorted(districts))}")
    district = districts.pop()

    from .requirements import CONSTRAINT_KINDS, EQUIPMENT_KINDS, OBJECTIVES, SNAPSHOT_OBJECTIVES

    objective_hits = _match_positions(low, catalog.objective_synonyms, OBJECTIVES)
    if not objective_hits:
        raise PipelineError("could not identify an objective in the request")
    objective = objective_hits[0][2]

    equipment = sorted({t for _, _, t in _match_positions(low, catalog.equipment_synonyms, EQUIPMENT_KINDS)})
    constraints = sorted({t for _, _, t in _match_positions(low, catalog.constraint_synonyms, CONSTRAINT_KINDS)})

    parts = [f"<district>{district}</district>", f"<objective>{objective}</objective>"]
    if objective in SNAPSHOT_OBJECTIVES:
        m = _TIMESTEP_RE.search(low)
        if m:
            parts.append(f"<timestep>{m.group(1)}</timestep>")
    parts.append(f"<equipment>{', '.join(equipment) if equipment else 'none'}</equipment>")
    parts.append(f"<constraints>{'; '.join(constraints) if constraints else 'none'}</constraints>")
    return parse_decorated(" ".join(parts), catalog)


def reference_formulation(
    req: StructuredRequirements, case: NetworkCase
) -> tuple[Model, NetworkCase, list[str]]:
    """Run the six formulator operations, returning round texts for the trace."""
    ctx = make_context(req, case)
    texts = []
    texts.append(render_fragment(build_objective(ctx)))
    texts.append(render_fragment(build_equipment(ctx)))
    texts.append(render_fragment(build_power_flow(ctx)))
    texts.append(render_fragment(build_additional(ctx)))
    assembled = assemble(ctx)
    texts.append(_assembled_text(assembled))
    final = convexify(assembled)
    texts.append(print_model(final))
    return final, ctx.work_case, texts


def _assembled_text(model: Model) -> str:
    """Full-script text for a not-yet-convexified model (fragment grammar)."""
    lines = [f"problem {model.name}"]
    lines.append(f"horizon T={model.horizon_T} dt={format_number(model.horizon_dt)}")
    if model.minmax_intent is not None:
        lines.append(f"# objective: minimize the worst-case {model.minmax_intent.kind}; epigraph pending")
    frag = Fragment(
        variables=list(model.variables.values()),
        constraints=list(model.constraints),
        objective=model.objective,
    )
    return "\n".join(lines) + "\n" + render_fragment(frag)


# ---------------------------------------------------------------------------
# staged runners (llm/replay path)
# ---------------------------------------------------------------------------


def _knowledge(slug: str) -> str:
    return asset_text(f"knowledge/{slug}.txt")


def _round_knowledge(round_index: int, req: StructuredRequirements | None) -> str:
    name = FORMULATION_ROUNDS[round_index]
    if name == "objective":
        return _knowledge(req.objective) if req else ""
    if name == "equipment":
        if not req or not req.equipment:
            return "No controllable equipment is requested."
        from .requirements import EQUIPMENT_KINDS

        kinds = [k for k in EQUIPMENT_KINDS if k in req.equipment]
        return "\n\n".join(_knowledge(k) for k in kinds)
    if name == "power_flow":
        return _knowledge("power_flow")
    if name == "additional":
        if not req or not req.extra_constraints:
            return "No additional operating constraints are requested."
        return "\n\n".join(_knowledge(c.kind) for c in req.extra_constraints)
    if name == "assembly":
        return _knowledge("assembly")
    return _knowledge("convexification")


def _case_digest(case: NetworkCase) -> str:
    from .cases import serialize_case

    return serialize_case(case)


def run_extraction(
    request: str,
    catalog: Catalog,
    client: ChatClient | None,
    ablation: str,
    mode: str,
    params: GenerationParams,
) -> tuple[StructuredRequirements | None, str, StageRecord]:
    """Stage one.  Returns (requirements or None, downstream payload, record)."""
    t0 = time.perf_counter()
    if ablation in ("no_ie", "no_iepf"):
        rec = StageRecord("extraction", "skipped", "stage disabled by ablation; raw request forwarded")
        return None, request, rec
    if mode == "reference":
        reqs = reference_extract(request, catalog)
        decorated = render_decorated(reqs)
        rec = StageRecord(
            "extraction", "ok", "reference extraction", outputs=[decorated],
            wall_time_ms=_elapsed_ms(t0, mode),
        )
        return reqs, decorated, rec
    bundle = assemble_prompt("extractor", catalog, ablation)
    messages = [ChatMessage("system", bundle.render()), ChatMessage("user", request)]
    raw = client.complete(messages, params)
    reqs = parse_decorated(raw, catalog)
    rec = StageRecord(
        "extraction", "ok", prompts=[_render_messages(messages)], outputs=[raw],
        wall_time_ms=_elapsed_ms(t0, mode),
    )
    return reqs, render_decorated(reqs), rec


def run_formulation(
    payload: str,
    reqs: StructuredRequirements | None,
    case: NetworkCase,
    catalog: Catalog,
    client: ChatClient | None,
    ablation: str,
    mode: str,
    params: GenerationParams,
) -> tuple[Model | None, NetworkCase | None, str, list[StageRecord]]:
    """Stage two.  Returns (model, work case, downstream payload, records).

    The model is None when the stage is ablated away (payload passes through)
    or when mode is llm/replay, where only the final round's text matters and
    the executable model is produced by the code stage.
    """
    if ablation in ("no_pf", "no_iepf"):
        rec = StageRecord("formulation", "skipped", "stage disabled by ablation; payload forwarded")
        return None, None, payload, [rec]
    if mode == "reference":
        t0 = time.perf_counter()
        model, work_case, texts = reference_formulation(reqs, case)
        records = [
            StageRecord(
                "formulation", "ok", f"round {i + 1}: {FORMULATION_ROUNDS[i]}",
                outputs=[text], round=i + 1,
                wall_time_ms=_elapsed_ms(t0, mode) if i == len(texts) - 1 else 0,
            )
            for i, text in enumerate(texts)
        ]
        return model, work_case, texts[-1], records

    records = []
    transcript: list[ChatMessage] = []
    last_output = ""
    for i, round_name in enumerate(FORMULATION_ROUNDS):
        t0 = time.perf_counter()
        bundle = assemble_prompt(
            "formulator", catalog, ablation, environment_extra=_round_knowledge(i, reqs)
        )
        instruction = asset_text(f"prompts/formulator/round{i + 1}.txt")
        user = instruction + "\n\nDispatch requirements:\n" + payload
        if round_name == "equipment":
            user += "\n\nCase document:\n" + _case_digest(case)
        messages = [ChatMessage("system", bundle.render()), *transcript, ChatMessage("user", user)]
        raw = client.complete(messages, params)
        try:
            fragment = parse_fragment(raw)
        except ModelError as exc:
            rec = StageRecord(
                "formulation", "error", f"round {i + 1} fragment parse failed: {exc}",
                prompts=[_render_messages(messages)], outputs=[raw], round=i + 1,
                wall_time_ms=_elapsed_ms(t0, mode),
            )
            records.append(rec)
            raise StageFailure(records, f"formulation round {i + 1}: {exc}") from exc
        del fragment
        records.append(
            StageRecord(
                "formulation", "ok", f"round {i + 1}: {round_name}",
                prompts=[_render_messages(messages)], outputs=[raw], round=i + 1,
                wall_time_ms=_elapsed_ms(t0, mode),
            )
        )
        transcript.extend([ChatMessage("user", user), ChatMessage("assistant", raw)])
        last_output = raw
    return None, None, last_output, records


def run_code_stage(
    payload: str,
    catalog: Catalog,
    client: ChatClient | None,
    ablation: str,
    mode: str,
    params: GenerationParams,
    store: RagStore | None,
    reference_model: Model | None = None,
) -> tuple[str, StageRecord]:
    """Stage three: emit the final model script text."""
    t0 = time.perf_counter()
    if mode == "reference":
        text = print_model(reference_model)
        rec = StageRecord(
            "code", "ok", "reference print of the assembled model", outputs=[text],
            wall_time_ms=_elapsed_ms(t0, mode),
        )
        return text, rec

    exemplars: tuple[str, ...] = ()
    detail = ""
    if ablation == "no_fs":
        detail = "no exemplars (few-shot ablated)"
    elif ablation == "no_rag":
        entries = store.fixed_exemplars(3) if store else []
        exemplars = tuple(e.exemplar for e in entries)
        detail = "fixed exemplars (retrieval ablated)"
    elif store is not None:
        ranked = retrieve_examples(embed_text(payload), store, 3)
        exemplars = tuple(entry.exemplar for entry, _ in ranked)
        detail = "retrieved exemplars: " + ", ".join(f"{sim:.4f}" for _, sim in ranked)
    env_extra = _knowledge("case_format") + "\n\n" + _knowledge("dsl_format")
    bundle = assemble_prompt("programmer", catalog, ablation, few_shot=exemplars, environment_extra=env_extra)
    user = "Emit the final optimization script for this problem:\n\n" + payload
    messages = [ChatMessage("system", bundle.render()), ChatMessage("user", user)]
    raw = client.complete(messages, params)
    rec = StageRecord(
        "code", "ok", detail, prompts=[_render_messages(messages)], outputs=[raw],
        wall_time_ms=_elapsed_ms(t0, mode),
    )
    return raw, rec


class StageFailure(PipelineError):
    """Wraps the records accumulated before a stage died."""

    def __init__(self, records: list[StageRecord], message: str) -> None:
        super().__init__(message)
        self.records = records


def _render_messages(messages: list[ChatMessage]) -> str:
    return "\n".join(f"[{m.role}]\n{m.content}" for m in messages)


def _elapsed_ms(t0: float, mode: str) -> int:
    # replay traces must be byte-identical across runs, so no timing there
    if mode == "replay":
        return 0
    return int((time.perf_counter() - t0) * 1000)


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------


ReviewHook = Callable[[StructuredRequirements, PipelineTrace], StructuredRequirements]


def run_pipeline(
    request: str,
    case: NetworkCase,
    catalog: Catalog,
    mode: str = "reference",
    ablation: str = "full",
    seed: int | None = None,
    client: ChatClient | None = None,
    store: RagStore | None = None,
    options: SolveOptions | None = None,
    review: ReviewHook | None = None,
) -> PipelineResult:
    """Run extraction, formulation, code, and solve for one request.

    In llm/replay modes a chat client is required.  ``review`` is called with
    the extracted requirements (when extraction ran) and may return edited
    requirements; the edit is recorded in the trace.
    """
    if mode not in MODES:
        raise PipelineError(f"unknown mode {mode!r}")
    if ablation not in ABLATIONS:
        raise PipelineError(f"unknown ablation {ablation!r}")
    if mode in ("llm", "replay") and client is None:
        if mode == "llm":
            client = HttpChatClient()
        else:
            raise PipelineError("replay mode needs a transcript client")

    params = GenerationParams(seed=seed)
    trace = PipelineTrace(request, mode, ablation, seed)
    result = PipelineResult(trace)

    def fail(stage: str, exc: Exception, extra: list[StageRecord] | None = None) -> PipelineResult:
        if extra:
            trace.stages.extend(extra)
        else:
            trace.stages.append(StageRecord(stage, "error", str(exc)))
        trace.error = f"{stage}: {exc}"
        return result

    # stage one: extraction
    try:
        reqs, payload, rec = run_extraction(request, catalog, client, ablation, mode, params)
        trace.stages.append(rec)
    except (PipelineError, RequirementsError, ChatError) as exc:
        return fail("extraction", exc)
    if reqs is not None:
        problems = validate_requirements(reqs, catalog, case)
        if problems:
            return fail("extraction", PipelineError("; ".join(problems)))
        trace.district = reqs.district

    # reference mode still derives requirements internally when the stage is
    # ablated: there is no generated artifact whose absence could differ
    if reqs is None and mode == "reference":
        try:
            reqs = reference_extract(request, catalog)
            trace.district = reqs.district
        except PipelineError as exc:
            return fail("extraction", exc)

    if review is not None and reqs is not None:
        edited = review(reqs, trace)
        if edited != reqs:
            trace.stages.append(
                StageRecord(
                    "review", "ok", "requirements edited by operator",
                    outputs=[render_decorated(edited)],
                )
            )
            reqs = edited
            payload = render_decorated(edited)
        else:
            trace.stages.append(StageRecord("review", "ok", "requirements approved"))

    # stage two: formulation
    try:
        model, work_case, payload, records = run_formulation(
            payload, reqs, case, catalog, client, ablation, mode, params
        )
        trace.stages.extend(records)
    except StageFailure as exc:
        return fail("formulation", exc, exc.records)
    except (PipelineError, FormulationError, RequirementsError, ChatError) as exc:
        return fail("formulation", exc)

    # reference mode: wiring ablations skip the trace stage, not the artifact
    if model is None and mode == "reference":
        try:
            if reqs is None:
                reqs = reference_extract(request, catalog)
            model, work_case, _texts = reference_formulation(reqs, case)
            payload = print_model(model)
        except (PipelineError, FormulationError, ModelError) as exc:
            return fail("formulation", exc)

    result.requirements = reqs

    # stage three: code
    try:
        code_text, rec = run_code_stage(
            payload, catalog, client, ablation, mode, params, store, reference_model=model
        )
        trace.stages.append(rec)
    except (PipelineError, ChatError, ModelError) as exc:
        return fail("code", exc)

    # executability: parse + canonicalize + solve
    t0 = time.perf_counter()
    try:
        final_model = parse_model(code_text)
        canonical = canonicalize(final_model)
    except ModelError as exc:
        trace.stages.append(StageRecord("solve", "error", f"not executable: {exc}"))
        trace.error = f"code: {exc}"
        return result

    try:
        solution = solve_misocp(canonical, options)
    except Exception as exc:  # solver blow-up is a distinct failure class
        trace.stages.append(StageRecord("solve", "error", f"solver failed: {exc}"))
        trace.error = f"solve: {exc}"
        return result

    result.model = final_model
    result.canonical = canonical
    result.solution = solution
    result.executable = True

    if work_case is None:
        work_case = _work_case_for(final_model, case)
    result.work_case = work_case

    solve_doc = {
        "status": solution.status,
        "objective": solution.objective,
        "iterations": solution.iterations,
        "nodes": solution.nodes,
        "wall_time_ms": _elapsed_ms(t0, mode),
    }
    if solution.values:
        tightness = check_tightness(canonical, solution)
        solve_doc["tightness_max_gap"] = tightness.max_gap
        solve_doc["max_violation"] = solution.max_violation
        try:
            strategy = extract_strategy(final_model, solution, work_case)
            result.strategy = strategy.to_document()
        except ModelError as exc:
            solve_doc["strategy_error"] = str(exc)
    trace.solve = solve_doc
    trace.stages.append(
        StageRecord("solve", "ok", f"status {solution.status}", wall_time_ms=solve_doc["wall_time_ms"])
    )
    return result


def write_run_artifacts(
    result: PipelineResult,
    out_dir: str,
    redact: Callable[[str], str] | None = None,
) -> list[str]:
    """Write the run's artifacts into a directory; returns the file names.

    Always writes trace.json; model/solution/strategy/voltage files appear
    when the corresponding artifact exists.  ``redact`` is applied to every
    file body before it touches disk.
    """
    from pathlib import Path

    base = Path(out_dir)
    base.mkdir(parents=True, exist_ok=True)
    clean = redact or (lambda text: text)
    written = []

    def emit(name: str, text: str) -> None:
        (base / name).write_text(clean(text), encoding="utf-8")
        written.append(name)

    emit("trace.json", json.dumps(result.trace.to_document(), indent=2) + "\n")
    if result.model is not None:
        emit("model.dsl", print_model(result.model))
    if result.solution is not None:
        sol = result.solution
        emit("solution.json", json.dumps({
            "status": sol.status,
            "objective": sol.objective,
            "iterations": sol.iterations,
            "nodes": sol.nodes,
            "values": {k: sol.values[k] for k in sorted(sol.values)},
        }, indent=2) + "\n")
    if result.strategy is not None:
        emit("strategy.json", json.dumps(result.strategy, indent=2) + "\n")
        if result.work_case is not None:
            emit("voltage.csv", baseline_voltage_table(result.work_case, result.strategy))
    return written


def _work_case_for(model: Model, case: NetworkCase) -> NetworkCase:
    if model.horizon_T == case.horizon.T:
        return case
    m = re.search(r"_t(\d+)$", model.name)
    t_hat = int(m.group(1)) if m else 0
    return snapshot_at(case, min(t_hat, case.horizon.T - 1))


def baseline_voltage_table(case: NetworkCase, strategy: dict) -> str:
    """CSV ``bus,t,v_before,v_after`` comparing the passive baseline with a strategy.

    The case must cover the same horizon the strategy was solved on (pass the
    pipeline's work case, which is already the snapshot for snapshot models).
    """
    T = strategy["horizon"]["T"]
    if case.horizon.T != T:
        raise PipelineError(
            f"strategy horizon T={T} does not match the case horizon T={case.horizon.T}"
        )
    base = baseline_power_flow(case)
    lines = ["bus,t,v_before,v_after"]
    voltages = strategy.get("voltages", {})
    for bus in case.bus_ids():
        after_series = voltages.get(str(bus))
        for t in range(T):
            before = math.sqrt(max(base.steps[t].v[bus], 0.0))
            after = after_series[t] if after_series else before
            lines.append(f"{bus},{t},{format_number(round(before, 9))},{format_number(round(after, 9))}")
    return "\n".join(lines) + "\n"
