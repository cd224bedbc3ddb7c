"""Command line entry points.

Four subcommands cover the daily workflow: validate a case file, run one
request end to end, evaluate a request suite, and serve the HTTP gateway.

Exit codes: 0 success, 2 usage error (argparse), 3 pipeline or validation
failure, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .cases import CaseError, load_case
from .evaluation import EvaluationError, load_requests, run_suite
from .gateway import ServiceConfig, serve
from .pipeline import (
    ABLATIONS,
    MODES,
    PipelineError,
    ReplayChatClient,
    bundled_catalog,
    bundled_ragstore,
    bundled_requests,
    run_pipeline,
    write_run_artifacts,
)

EXIT_OK = 0
EXIT_PIPELINE = 3
EXIT_SOLVER = 4


def _read_arg_text(value: str) -> str:
    """Resolve a text-or-@file argument."""
    if value.startswith("@"):
        return Path(value[1:]).read_text(encoding="utf-8")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adnopt",
        description="Dispatch optimization for active distribution networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    case = sub.add_parser("case", help="case file utilities")
    case_sub = case.add_subparsers(dest="case_command", required=True)
    validate = case_sub.add_parser("validate", help="check a case file")
    validate.add_argument("file", help="path to a case document")

    run = sub.add_parser("run", help="run one dispatch request")
    run.add_argument("--case", required=True, help="path to a case document")
    run.add_argument("--request", required=True,
                     help="request text, or @path to read it from a file")
    run.add_argument("--mode", default="reference", choices=sorted(MODES))
    run.add_argument("--ablation", default="full", choices=list(ABLATIONS))
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--transcript", default=None,
                     help="recorded exchange list for replay mode")
    run.add_argument("--out", required=True, help="directory for run artifacts")

    ev = sub.add_parser("eval", help="evaluate a request suite")
    ev.add_argument("--suite", default=None,
                    help="path to a request suite document (default: bundled)")
    ev.add_argument("--mode", default="reference", choices=sorted(MODES))
    ev.add_argument("--ablation", action="append", default=None, dest="ablations",
                    choices=list(ABLATIONS), help="repeatable; default full")
    ev.add_argument("--repeats", type=int, default=3)
    ev.add_argument("--out", required=True, help="directory for the report")

    srv = sub.add_parser("serve", help="start the HTTP gateway")
    srv.add_argument("--config", default=None, help="path to a service config document")

    return parser


def _cmd_case_validate(args: argparse.Namespace) -> int:
    try:
        text = Path(args.file).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"cannot read case file: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    try:
        case = load_case(text)
    except CaseError as exc:
        print(f"invalid case: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    print(f"case ok: district {case.district}, {len(case.buses)} buses, "
          f"{len(case.branches)} branches, horizon {case.horizon.T}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        case = load_case(Path(args.case).read_text(encoding="utf-8"))
        request = _read_arg_text(args.request)
    except (OSError, CaseError) as exc:
        print(f"cannot load inputs: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    client = None
    if args.mode == "replay":
        if args.transcript is None:
            print("replay mode needs --transcript", file=sys.stderr)
            return EXIT_PIPELINE
        try:
            records = json.loads(Path(args.transcript).read_text(encoding="utf-8"))
            client = ReplayChatClient(records)
        except (OSError, json.JSONDecodeError, PipelineError) as exc:
            print(f"cannot load transcript: {exc}", file=sys.stderr)
            return EXIT_PIPELINE

    try:
        result = run_pipeline(
            request,
            case,
            bundled_catalog(),
            mode=args.mode,
            ablation=args.ablation,
            seed=args.seed,
            client=client,
            store=bundled_ragstore(),
        )
    except PipelineError as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    written = write_run_artifacts(result, args.out)
    print(f"wrote {', '.join(written)} to {args.out}")

    if result.failed:
        print(f"run failed: {result.trace.error}", file=sys.stderr)
        if result.trace.error and result.trace.error.startswith("solve:"):
            return EXIT_SOLVER
        return EXIT_PIPELINE
    status = result.solution.status if result.solution is not None else "unknown"
    print(f"solve status: {status}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    try:
        if args.suite is None:
            requests = bundled_requests()
        else:
            requests = load_requests(Path(args.suite).read_text(encoding="utf-8"))
    except (OSError, EvaluationError) as exc:
        print(f"cannot load suite: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    try:
        report = run_suite(
            requests,
            bundled_catalog(),
            mode=args.mode,
            ablations=tuple(args.ablations) if args.ablations else ("full",),
            repeats=args.repeats,
            store=bundled_ragstore(),
        )
    except (EvaluationError, PipelineError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_PIPELINE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_document()
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    agg = doc["aggregates"]
    print(f"wrote report.json to {args.out}")
    for ablation in doc["ablations"]:
        row = agg[ablation]
        print(f"{ablation}: formulation {row['mean_formulation_score']}, "
              f"code {row['mean_code_score']}, pass@1 {row['pass_at_1']}, "
              f"pass@3 {row['pass_at_3']}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    if args.config is not None:
        try:
            config = ServiceConfig.from_document(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            print(f"cannot load config: {exc}", file=sys.stderr)
            return EXIT_PIPELINE
    else:
        config = ServiceConfig()
    print(f"serving on {config.host}:{config.port} "
          f"(mode {config.mode}, review gate {'on' if config.review_gate else 'off'})")
    serve(config)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "case":
        return _cmd_case_validate(args)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "eval":
        return _cmd_eval(args)
    return _cmd_serve(args)


if __name__ == "__main__":
    sys.exit(main())
