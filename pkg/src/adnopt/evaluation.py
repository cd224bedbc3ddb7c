"""Structural grading and batch evaluation of pipeline runs.

Grading is an automatic proxy for expert review: each of the five model
components is worth 20 points, awarded by structural diff against the
reference formulation (full pairing 20, some overlap 10, none 0).  Reports
label the scores as structural, since no human judgment is involved.

A suite run fans out over requests, seeds and ablations, records one
RunRecord per run, and folds the records into per-ablation aggregates in a
deterministic order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .formulator import formulate
from .modelir import COMPONENTS, ComponentDiff, Model, ModelError, canonicalize, diff_components
from .pipeline import (
    ChatClient,
    PipelineError,
    PipelineResult,
    RagStore,
    bundled_catalog,
    case_for_district,
    reference_extract,
    run_pipeline,
)
from .requirements import Catalog, RequirementsError, render_decorated
from .solver import SolveOptions

SCORE = {"match": 20, "partial": 10, "missing": 0}


class EvaluationError(ValueError):
    """Bad evaluation input (empty record sets, malformed suite files)."""


@dataclass(frozen=True)
class GradeReport:
    """Five component scores plus the diff evidence behind them."""

    scores: dict[str, int]
    total: int
    evidence: dict[str, ComponentDiff]

    def to_document(self) -> dict:
        return {
            "scores": {k: self.scores[k] for k in COMPONENTS},
            "total": self.total,
            "evidence": {
                k: {
                    "status": d.status,
                    "matched": d.matched,
                    "only_reference": d.only_reference,
                    "only_candidate": d.only_candidate,
                }
                for k, d in self.evidence.items()
            },
        }


def grade_formulation(generated: Model, reference: Model) -> GradeReport:
    """Score a generated model against the reference on the five axes."""
    diff = diff_components(canonicalize(reference), canonicalize(generated))
    scores = {component: SCORE[diff[component].status] for component in COMPONENTS}
    return GradeReport(scores, sum(scores.values()), diff)


@dataclass
class RunRecord:
    request_id: str
    seed: int
    ablation: str
    executable: bool
    solve_status: str | None = None  # absent unless executable
    formulation_grade: GradeReport | None = None
    code_grade: GradeReport | None = None
    extraction_correct: bool | None = None
    error: str | None = None
    trace: dict | None = None

    def to_document(self) -> dict:
        doc = {
            "request_id": self.request_id,
            "seed": self.seed,
            "ablation": self.ablation,
            "executable": self.executable,
        }
        if self.executable:
            doc["solve_status"] = self.solve_status
        if self.formulation_grade is not None:
            doc["formulation_grade"] = self.formulation_grade.to_document()
        if self.code_grade is not None:
            doc["code_grade"] = self.code_grade.to_document()
        if self.extraction_correct is not None:
            doc["extraction_correct"] = self.extraction_correct
        if self.error is not None:
            doc["error"] = self.error
        return doc


def pass_at_1(records: list[RunRecord]) -> float:
    if not records:
        raise EvaluationError("pass@1 over an empty record set")
    return sum(1 for r in records if r.executable) / len(records)


def pass_at_3(records: list[RunRecord]) -> float:
    """Fraction of requests with at least one executable run among its records."""
    if not records:
        raise EvaluationError("pass@3 over an empty record set")
    groups: dict[str, bool] = {}
    for rec in records:
        groups[rec.request_id] = groups.get(rec.request_id, False) or rec.executable
    return sum(1 for ok in groups.values() if ok) / len(groups)


def format_rate(rate: float) -> str:
    return f"{rate:.2f}"


def _mean_score(records: list[RunRecord], which: str) -> float:
    """Mean grade with absent grades counted as zero (nothing was produced)."""
    if not records:
        raise EvaluationError("mean score over an empty record set")
    total = 0
    for rec in records:
        grade = rec.formulation_grade if which == "formulation" else rec.code_grade
        total += grade.total if grade is not None else 0
    return total / len(records)


@dataclass
class SuiteReport:
    mode: str
    seeds: tuple[int, ...]
    ablations: tuple[str, ...]
    records: list[RunRecord]

    def aggregates(self) -> dict[str, dict]:
        out = {}
        for ablation in self.ablations:
            subset = [r for r in self.records if r.ablation == ablation]
            out[ablation] = {
                "mean_formulation_score": _mean_score(subset, "formulation"),
                "mean_code_score": _mean_score(subset, "code"),
                "pass_at_1": pass_at_1(subset),
                "pass_at_3": pass_at_3(subset),
            }
        return out

    def to_document(self) -> dict:
        aggregates = {
            ablation: {
                "mean_formulation_score": round(agg["mean_formulation_score"], 4),
                "mean_code_score": round(agg["mean_code_score"], 4),
                "pass_at_1": format_rate(agg["pass_at_1"]),
                "pass_at_3": format_rate(agg["pass_at_3"]),
            }
            for ablation, agg in self.aggregates().items()
        }
        breakdown: dict[str, dict] = {}
        for rec in self.records:
            row = breakdown.setdefault(rec.request_id, {})
            row.setdefault(rec.ablation, []).append(
                {
                    "seed": rec.seed,
                    "executable": rec.executable,
                    "formulation": rec.formulation_grade.total if rec.formulation_grade else 0,
                    "code": rec.code_grade.total if rec.code_grade else 0,
                    "error": rec.error,
                }
            )
        return {
            "mode": self.mode,
            "seeds": list(self.seeds),
            "ablations": list(self.ablations),
            "grading": "structural diff against the reference formulation (automatic proxy)",
            "aggregates": aggregates,
            "requests": breakdown,
        }


ClientFactory = Callable[[str, int, str], ChatClient]


def load_requests(text: str) -> list[dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EvaluationError(f"requests file is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise EvaluationError("requests file must be a JSON array")
    for i, entry in enumerate(doc):
        for key in ("id", "district", "text"):
            if key not in entry:
                raise EvaluationError(f"request {i} lacks {key!r}")
    return doc


def evaluate_run(
    request: dict,
    result: PipelineResult,
    reference: Model,
    seed: int,
    ablation: str,
) -> RunRecord:
    """Fold one pipeline result into a RunRecord against the reference model."""
    rec = RunRecord(request["id"], seed, ablation, result.executable)
    if result.executable:
        rec.solve_status = result.solution.status
    rec.error = result.trace.error
    rec.trace = result.trace.to_document()

    extraction = [s for s in result.trace.stages if s.stage == "extraction" and s.status == "ok"]
    if extraction and request.get("expected") and extraction[0].outputs:
        rec.extraction_correct = extraction[0].outputs[0] == request["expected"]

    rounds = [
        s for s in result.trace.stages if s.stage == "formulation" and s.status == "ok" and s.round
    ]
    if rounds:
        from .modelir import parse_model

        try:
            formulation_model = parse_model(rounds[-1].outputs[0])
            rec.formulation_grade = grade_formulation(formulation_model, reference)
        except ModelError:
            rec.formulation_grade = None
    if result.model is not None:
        rec.code_grade = grade_formulation(result.model, reference)
    return rec


def run_suite(
    requests: list[dict],
    catalog: Catalog | None = None,
    mode: str = "reference",
    ablations: tuple[str, ...] = ("full",),
    repeats: int = 3,
    seeds: tuple[int, ...] | None = None,
    client_factory: ClientFactory | None = None,
    store: RagStore | None = None,
    options: SolveOptions | None = None,
    parallelism: int = 1,
) -> SuiteReport:
    """Run every (request, seed, ablation) tuple and fold the records.

    The fold order is (ablation, request id, seed) regardless of execution
    order, so reports are deterministic even under parallel fan-out.
    """
    catalog = catalog or bundled_catalog()
    if seeds is None:
        seeds = tuple(range(1, repeats + 1))

    jobs = [
        (ablation, request, seed)
        for ablation in ablations
        for request in sorted(requests, key=lambda r: r["id"])
        for seed in seeds
    ]

    references: dict[str, tuple] = {}

    def reference_for(request: dict):
        rid = request["id"]
        if rid not in references:
            case = case_for_district(request["district"], catalog)
            reqs = reference_extract(request["text"], catalog)
            references[rid] = (case, canonicalize(formulate(reqs, case)))
        return references[rid]

    def one(job) -> RunRecord:
        ablation, request, seed = job
        try:
            case, reference = reference_for(request)
        except (PipelineError, RequirementsError, ModelError) as exc:
            return RunRecord(
                request["id"], seed, ablation, False, error=f"reference setup: {exc}"
            )
        client = client_factory(request["id"], seed, ablation) if client_factory else None
        result = run_pipeline(
            request["text"], case, catalog,
            mode=mode, ablation=ablation, seed=seed,
            client=client, store=store, options=options,
        )
        return evaluate_run(request, result, reference, seed, ablation)

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(job) for job in jobs]

    rank = {ablation: i for i, ablation in enumerate(ablations)}
    records.sort(key=lambda r: (rank[r.ablation], r.request_id, seeds.index(r.seed)))
    return SuiteReport(mode, tuple(seeds), tuple(ablations), records)
