"""Translation scoring: success metrics, debug rounds and CodeBLEU."""

from dialogue_forge.evaluator.codebleu import CodeBleuScore, ScoreUndefined, codebleu
from dialogue_forge.evaluator.metrics import (
    DEFAULT_DEBUG_ROUNDS,
    ConsistencyError,
    CurveRow,
    EmptyEvaluation,
    EvalJob,
    EvalRecord,
    MetricReport,
    aggregate,
    curve_csv,
    curve_table,
    debug_curve,
    evaluate_many,
    evaluate_one,
    merge_harness,
    percent,
    reports_by_round,
)

__all__ = [
    "DEFAULT_DEBUG_ROUNDS",
    "CodeBleuScore",
    "ConsistencyError",
    "CurveRow",
    "EmptyEvaluation",
    "EvalJob",
    "EvalRecord",
    "MetricReport",
    "ScoreUndefined",
    "aggregate",
    "codebleu",
    "curve_csv",
    "curve_table",
    "debug_curve",
    "evaluate_many",
    "evaluate_one",
    "merge_harness",
    "percent",
    "reports_by_round",
]
