"""HTTP service for submitting dispatch runs and inspecting their artifacts.

Runs execute on worker threads; the service stays responsive while a solve is
in flight.  With the review gate enabled a run pauses after extraction in
state awaiting_review until an operator approves or edits the structured
requirements; the transition back to running is a compare-and-swap so two
concurrent reviews cannot both win.  Completed runs persist their artifacts
as write-once files under the data directory, keyed by run id.

Chat credentials live only in process memory and request headers.  Anything
persisted or served goes through a redaction pass as defense in depth.
"""

from __future__ import annotations

import itertools
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from .cases import CaseError, NetworkCase, baseline_power_flow, load_case, serialize_case
from .evaluation import EvaluationError, load_requests, run_suite
from .pipeline import (
    PipelineResult,
    PipelineTrace,
    ReplayChatClient,
    baseline_voltage_table,
    bundled_catalog,
    bundled_requests,
    bundled_ragstore,
    case_for_district,
    run_pipeline,
    write_run_artifacts,
)
from .requirements import (
    RequirementsError,
    StructuredRequirements,
    parse_decorated,
    render_decorated,
    validate_requirements,
)


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    mode: str = "reference"
    review_gate: bool = False
    data_dir: str = "./adn-data"
    allow_origins: tuple[str, ...] = ("*",)

    @staticmethod
    def from_document(text: str) -> "ServiceConfig":
        doc = json.loads(text)
        cfg = ServiceConfig()
        for key in ("host", "port", "mode", "review_gate", "data_dir"):
            if key in doc:
                setattr(cfg, key, doc[key])
        if "allow_origins" in doc:
            cfg.allow_origins = tuple(doc["allow_origins"])
        return cfg


_id_lock = threading.Lock()
_id_seq = itertools.count()


def new_run_id() -> str:
    """Unique, sortable id: nanosecond timestamp plus a process-wide counter."""
    with _id_lock:
        seq = next(_id_seq)
    return f"{time.time_ns():020d}-{seq:06d}"


class RunState:
    """One run's mutable state; guarded by its own lock."""

    def __init__(self, run_id: str, case_id: str, request: str, mode: str,
                 ablation: str, seed: int | None) -> None:
        self.run_id = run_id
        self.case_id = case_id
        self.request = request
        self.mode = mode
        self.ablation = ablation
        self.seed = seed
        self.status = "running"
        self.stage = "extraction"
        self.created_at = time.time()
        self.updated_at = self.created_at
        self.lock = threading.Lock()
        self.review_event = threading.Event()
        self.pending_requirements: StructuredRequirements | None = None
        self.edited_requirements: StructuredRequirements | None = None
        self.result: PipelineResult | None = None
        self.error: str | None = None

    def transition(self, expected: str, to: str) -> bool:
        """Compare-and-swap on status; False when the run moved on already."""
        with self.lock:
            if self.status != expected:
                return False
            self.status = to
            self.updated_at = time.time()
            return True

    def view(self) -> dict:
        with self.lock:
            doc = {
                "run_id": self.run_id,
                "case_id": self.case_id,
                "request": self.request,
                "mode": self.mode,
                "ablation": self.ablation,
                "seed": self.seed,
                "status": self.status,
                "stage": self.stage,
                "created_at": self.created_at,
                "updated_at": self.updated_at,
            }
            if self.status == "awaiting_review" and self.pending_requirements is not None:
                doc["extraction"] = render_decorated(self.pending_requirements)
            if self.error is not None:
                doc["error"] = self.error
            if self.result is not None:
                doc["trace"] = self.result.trace.to_document()
                if self.result.strategy is not None:
                    doc["has_strategy"] = True
            return doc


class Gateway:
    def __init__(self, config: ServiceConfig) -> None:
        self.config = config
        self.catalog = bundled_catalog()
        self.store = bundled_ragstore()
        self.cases: dict[str, NetworkCase] = {}
        self.cases_lock = threading.Lock()
        self.runs: dict[str, RunState] = {}
        self.runs_lock = threading.Lock()
        for name in self.catalog.district_names():
            self.cases[name] = case_for_district(name, self.catalog)
        self.data_dir = Path(config.data_dir)

    # -- redaction ---------------------------------------------------------

    def _secrets(self) -> list[str]:
        out = []
        for var in ("ADN_CHAT_KEY",):
            value = os.environ.get(var)
            if value:
                out.append(value)
        return out

    def redact(self, text: str) -> str:
        for secret in self._secrets():
            text = text.replace(secret, "[redacted]")
        return text

    # -- cases ---------------------------------------------------------------

    def add_case(self, text: str) -> str:
        case = load_case(text)
        with self.cases_lock:
            self.cases[case.district] = case
        self._persist_text(self.data_dir / "cases" / f"{case.district}.json", serialize_case(case))
        return case.district

    def get_case(self, case_id: str) -> NetworkCase:
        with self.cases_lock:
            if case_id not in self.cases:
                raise KeyError(case_id)
            return self.cases[case_id]

    # -- runs ----------------------------------------------------------------

    def submit(self, case_id: str, request: str, mode: str | None, ablation: str,
               seed: int | None, transcript: list[dict] | None = None) -> RunState:
        case = self.get_case(case_id)
        run = RunState(new_run_id(), case_id, request, mode or self.config.mode, ablation, seed)
        with self.runs_lock:
            self.runs[run.run_id] = run
        worker = threading.Thread(
            target=self._execute, args=(run, case, transcript), daemon=True
        )
        worker.start()
        return run

    def _review_hook(self, run: RunState):
        def hook(reqs: StructuredRequirements, trace: PipelineTrace) -> StructuredRequirements:
            with run.lock:
                run.pending_requirements = reqs
                run.stage = "review"
            if not run.transition("running", "awaiting_review"):
                return reqs
            run.review_event.wait()
            with run.lock:
                edited = run.edited_requirements or reqs
                run.stage = "formulation"
            return edited

        return hook

    def _execute(self, run: RunState, case: NetworkCase, transcript: list[dict] | None) -> None:
        client = None
        if run.mode == "replay":
            client = ReplayChatClient(transcript or [])
        try:
            result = run_pipeline(
                run.request, case, self.catalog,
                mode=run.mode, ablation=run.ablation, seed=run.seed,
                client=client, store=self.store,
                review=self._review_hook(run) if self.config.review_gate else None,
            )
        except Exception as exc:  # defensive: a worker must never die silently
            with run.lock:
                run.status = "failed"
                run.stage = "done"
                run.updated_at = time.time()
                run.result = None
                run.error = str(exc)
            return
        with run.lock:
            run.result = result
            run.stage = "done"
            run.status = "failed" if result.failed else "succeeded"
            run.error = result.trace.error
            run.updated_at = time.time()
        self._persist_run(run, case)

    def review(self, run_id: str, payload: dict) -> RunState:
        run = self.get_run(run_id)
        edited: StructuredRequirements | None = None
        if not payload.get("approve", False):
            text = payload.get("requirements")
            if not isinstance(text, str) or not text.strip():
                raise ValueError("review needs approve=true or a requirements string")
            try:
                edited = parse_decorated(text, self.catalog)
            except RequirementsError as exc:
                raise ValueError(str(exc)) from exc
            problems = validate_requirements(edited, self.catalog, self.get_case(run.case_id))
            if problems:
                raise ValueError("; ".join(problems))
        with run.lock:
            if run.status != "awaiting_review":
                raise PermissionError(f"run is {run.status}, not awaiting_review")
            run.edited_requirements = edited
            run.status = "running"
            run.updated_at = time.time()
        run.review_event.set()
        return run

    def get_run(self, run_id: str) -> RunState:
        with self.runs_lock:
            if run_id not in self.runs:
                raise KeyError(run_id)
            return self.runs[run_id]

    # -- persistence -----------------------------------------------------------

    def _persist_text(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.exists():
            return  # write-once; artifacts are immutable
        path.write_text(self.redact(text), encoding="utf-8")

    def _persist_run(self, run: RunState, case: NetworkCase) -> None:
        result = run.result
        if result is None:
            return
        base = self.data_dir / "runs" / run.run_id
        if base.exists():
            return  # write-once; artifacts are immutable
        write_run_artifacts(result, str(base), redact=self.redact)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    gw = Gateway(config)
    app = FastAPI(title="dispatch gateway")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=list(config.allow_origins),
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.gateway = gw

    @app.post("/api/cases", status_code=201)
    def post_case(body: dict):
        try:
            case_id = gw.add_case(json.dumps(body))
        except CaseError as exc:
            raise HTTPException(422, detail=str(exc))
        return {"case_id": case_id}

    @app.post("/api/runs", status_code=202)
    def post_run(body: dict):
        case_id = body.get("case_id")
        request = body.get("request")
        if not isinstance(case_id, str) or not isinstance(request, str) or not request.strip():
            raise HTTPException(422, detail="need case_id and request text")
        mode = body.get("mode")
        ablation = body.get("ablation", "full")
        seed = body.get("seed")
        from .pipeline import ABLATIONS, MODES

        if mode is not None and mode not in MODES:
            raise HTTPException(422, detail=f"unknown mode {mode!r}")
        if ablation not in ABLATIONS:
            raise HTTPException(422, detail=f"unknown ablation {ablation!r}")
        if seed is not None and not isinstance(seed, int):
            raise HTTPException(422, detail="seed must be an integer")
        try:
            run = gw.submit(case_id, request, mode, ablation, seed, body.get("transcript"))
        except KeyError:
            raise HTTPException(404, detail=f"unknown case {case_id!r}")
        return {"run_id": run.run_id, "status": run.status}

    @app.get("/api/runs/{run_id}")
    def get_run(run_id: str):
        try:
            run = gw.get_run(run_id)
        except KeyError:
            raise HTTPException(404, detail=f"unknown run {run_id!r}")
        return json.loads(gw.redact(json.dumps(run.view())))

    @app.post("/api/runs/{run_id}/review")
    def post_review(run_id: str, body: dict):
        try:
            run = gw.review(run_id, body)
        except KeyError:
            raise HTTPException(404, detail=f"unknown run {run_id!r}")
        except PermissionError as exc:
            raise HTTPException(409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(422, detail=str(exc))
        return {"run_id": run.run_id, "status": run.status}

    @app.get("/api/runs/{run_id}/strategy")
    def get_strategy(run_id: str):
        try:
            run = gw.get_run(run_id)
        except KeyError:
            raise HTTPException(404, detail=f"unknown run {run_id!r}")
        with run.lock:
            result = run.result
        if result is None or result.strategy is None:
            raise HTTPException(404, detail="run has no strategy (yet)")
        body = {"strategy": result.strategy}
        if result.work_case is not None:
            body["voltage_csv"] = baseline_voltage_table(result.work_case, result.strategy)
            base = baseline_power_flow(result.work_case)
            v_lo, v_hi = base.worst_voltage()
            # the passive no-action reference, so clients can show deltas
            # without redoing any physics themselves
            body["baseline"] = {
                "losses": base.total_losses,
                "v_min": v_lo,
                "v_max": v_hi,
            }
        return json.loads(gw.redact(json.dumps(body)))

    @app.post("/api/eval")
    def post_eval(body: dict):
        requests = body.get("requests")
        if requests is None:
            requests = bundled_requests()
        mode = body.get("mode", "reference")
        ablations = tuple(body.get("ablations", ["full"]))
        seeds = tuple(body.get("seeds", [1, 2, 3]))
        try:
            report = run_suite(
                requests, gw.catalog, mode=mode, ablations=ablations, seeds=seeds,
                store=gw.store,
            )
            document = report.to_document()
        except (EvaluationError, ValueError) as exc:
            raise HTTPException(422, detail=str(exc))
        return json.loads(gw.redact(json.dumps(document)))

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
