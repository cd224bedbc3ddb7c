"""Dispatch optimization toolkit for active distribution networks.

Natural-language dispatch requests are extracted into structured
requirements, formulated as second-order cone programs over a branch-flow
network model, and solved with the bundled interior-point method.  The
public surface re-exported here covers the model IR, case files, the
deterministic reference path, the agent pipeline, the evaluation harness,
and the HTTP gateway.
"""

from .cases import (
    CaseError,
    NetworkCase,
    baseline_power_flow,
    load_case,
    serialize_case,
    snapshot_at,
)
from .evaluation import (
    EvaluationError,
    GradeReport,
    RunRecord,
    SuiteReport,
    grade_formulation,
    load_requests,
    pass_at_1,
    pass_at_3,
    run_suite,
)
from .formulator import FormulationError, formulate
from .gateway import Gateway, ServiceConfig, create_app, serve
from .ipm import ConeDims, ConicResult, SolverNumericalError, solve_conic
from .modelir import (
    Model,
    ModelError,
    canonicalize,
    diff_components,
    parse_fragment,
    parse_model,
    print_model,
    render_fragment,
)
from .pipeline import (
    ChatError,
    HttpChatClient,
    PipelineError,
    PipelineResult,
    PipelineTrace,
    ReplayChatClient,
    bundled_catalog,
    bundled_requests,
    reference_extract,
    reference_formulation,
    run_pipeline,
    write_run_artifacts,
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
    DispatchStrategy,
    Solution,
    SolveOptions,
    SolverError,
    check_tightness,
    extract_strategy,
    solve_misocp,
    solve_socp,
)

__version__ = "0.1.0"

__all__ = [
    "CaseError",
    "Catalog",
    "ChatError",
    "ConeDims",
    "ConicResult",
    "DispatchStrategy",
    "EvaluationError",
    "FormulationError",
    "Gateway",
    "GradeReport",
    "HttpChatClient",
    "Model",
    "ModelError",
    "NetworkCase",
    "PipelineError",
    "PipelineResult",
    "PipelineTrace",
    "ReplayChatClient",
    "RequirementsError",
    "RunRecord",
    "ServiceConfig",
    "SolveOptions",
    "Solution",
    "SolverError",
    "SolverNumericalError",
    "StructuredRequirements",
    "SuiteReport",
    "baseline_power_flow",
    "bundled_catalog",
    "bundled_requests",
    "canonicalize",
    "check_tightness",
    "create_app",
    "diff_components",
    "extract_strategy",
    "grade_formulation",
    "load_case",
    "load_catalog",
    "load_requests",
    "parse_decorated",
    "parse_fragment",
    "parse_model",
    "pass_at_1",
    "pass_at_3",
    "print_model",
    "formulate",
    "reference_extract",
    "reference_formulation",
    "render_decorated",
    "render_fragment",
    "run_pipeline",
    "run_suite",
    "serialize_case",
    "serve",
    "snapshot_at",
    "solve_conic",
    "solve_misocp",
    "solve_socp",
    "validate_requirements",
    "write_run_artifacts",
]
