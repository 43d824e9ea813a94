"""Compile / execute / unit-test success metrics and the debug-round protocol."""

from __future__ import annotations

import csv
import io
import json
import logging
import signal
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from dialogue_forge.corpus import SourceLanguage
from dialogue_forge.evaluator.codebleu import CodeBleuScore, codebleu
from dialogue_forge.gateway import BlockNotFound, DialogueMemory, Gateway, extract_code_block
from dialogue_forge.sandbox import RunOutcome, Sandbox, ToolchainMissing, parse_summary, tail

log = logging.getLogger(__name__)

MERGE_RULES = ("append", "none")
DEFAULT_DEBUG_ROUNDS = 3


class EmptyEvaluation(ValueError):
    pass


class ConsistencyError(AssertionError):
    """Cumulative counts went down between rounds: an accounting bug."""


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    compiled: bool
    executed: bool
    unit_passed: bool
    rounds_to_compile: int | None = None
    codebleu: CodeBleuScore | None = None
    untested: bool = False
    debug_rounds: int = 0
    note: str = ""

    def __post_init__(self) -> None:
        if self.unit_passed and not self.executed:
            raise ValueError(f"{self.sample_id}: unit_passed without executed")
        if self.executed and not self.compiled:
            raise ValueError(f"{self.sample_id}: executed without compiled")
        if self.rounds_to_compile is not None:
            if not self.compiled:
                raise ValueError(f"{self.sample_id}: rounds_to_compile set but not compiled")
            if self.rounds_to_compile < 0:
                raise ValueError(f"{self.sample_id}: negative rounds_to_compile")
        if self.untested and self.compiled:
            raise ValueError(f"{self.sample_id}: untested records carry no outcome")

    @property
    def compile_round(self) -> int | None:
        if not self.compiled:
            return None
        return self.rounds_to_compile or 0

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "compiled": self.compiled,
            "executed": self.executed,
            "unit_passed": self.unit_passed,
            "rounds_to_compile": self.rounds_to_compile,
            "codebleu": self.codebleu.to_dict() if self.codebleu else None,
            "untested": self.untested,
            "debug_rounds": self.debug_rounds,
            "note": self.note,
        }


def percent(count: int, total: int, places: int = 2) -> Decimal:
    """count/total as a percentage, rounded half-up."""
    if total <= 0:
        raise EmptyEvaluation("rate over an empty population")
    quantum = Decimal(1).scaleb(-places)
    return (Decimal(count) * 100 / Decimal(total)).quantize(quantum, rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class MetricReport:
    total: int
    compile_count: int
    execute_count: int
    unit_count: int
    per_round_curves: dict[int, tuple[int, int, int]] = field(default_factory=dict)
    untested: int = 0
    codebleu_mean: float | None = None
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.unit_count <= self.execute_count <= self.compile_count <= self.total:
            raise ConsistencyError(
                f"counts violate unit <= execute <= compile <= total: "
                f"{self.unit_count}, {self.execute_count}, {self.compile_count}, {self.total}"
            )

    @property
    def compile_rate(self) -> Decimal:
        return percent(self.compile_count, self.total)

    @property
    def execute_rate(self) -> Decimal:
        return percent(self.execute_count, self.total)

    @property
    def unit_rate(self) -> Decimal:
        return percent(self.unit_count, self.total)

    def rates(self, places: int = 2) -> dict[str, Decimal]:
        return {
            "compile": percent(self.compile_count, self.total, places),
            "execute": percent(self.execute_count, self.total, places),
            "unit": percent(self.unit_count, self.total, places),
        }

    def cell(self, metric: str) -> str:
        """Table cell text: ``count (rate%)``."""
        count = getattr(self, f"{metric}_count")
        return f"{count} ({percent(count, self.total)}%)"

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "untested": self.untested,
            "compile_count": self.compile_count,
            "execute_count": self.execute_count,
            "unit_count": self.unit_count,
            "rates": {k: str(v) for k, v in self.rates(2).items()},
            "rates_1dp": {k: str(v) for k, v in self.rates(1).items()},
            "per_round_curves": {
                str(r): {"compile": c, "execute": e, "unit": u}
                for r, (c, e, u) in sorted(self.per_round_curves.items())
            },
            "codebleu_mean": self.codebleu_mean,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        two, one = self.rates(2), self.rates(1)
        rows = [("metric", "count", "rate", "rate(1dp)")]
        for key, label in (("compile", "compilation"), ("execute", "execution"), ("unit", "unit test")):
            rows.append((label, str(getattr(self, f"{key}_count")), f"{two[key]}%", f"{one[key]}%"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
        lines.append(f"total: {self.total}" + (f"  untested: {self.untested}" if self.untested else ""))
        if self.codebleu_mean is not None:
            lines.append(f"codebleu: {self.codebleu_mean:.4f}")
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def cumulative_counts(records: Sequence[EvalRecord], round_index: int) -> tuple[int, int, int]:
    """Counts of records that compiled by ``round_index`` (and then executed / passed)."""
    c = e = u = 0
    for rec in records:
        r = rec.compile_round
        if r is None or r > round_index:
            continue
        c += 1
        e += rec.executed
        u += rec.unit_passed
    return c, e, u


def aggregate(records: Iterable[EvalRecord], rounds: int | None = None) -> MetricReport:
    records = list(records)
    if not records:
        raise EmptyEvaluation("no records to aggregate")
    tested = [r for r in records if not r.untested]
    notes = []
    untested = len(records) - len(tested)
    if untested:
        notes.append(f"{untested} record(s) untested (toolchain unavailable); excluded from denominators")
    if not tested:
        raise EmptyEvaluation("every record is untested")
    if rounds is None:
        rounds = max((r.compile_round or 0 for r in tested), default=0)
    curves = {i: cumulative_counts(tested, i) for i in range(rounds + 1)}
    scores = [r.codebleu.combined for r in tested if r.codebleu is not None]
    return MetricReport(
        total=len(tested),
        compile_count=sum(r.compiled for r in tested),
        execute_count=sum(r.executed for r in tested),
        unit_count=sum(r.unit_passed for r in tested),
        per_round_curves=curves,
        untested=untested,
        codebleu_mean=sum(scores) / len(scores) if scores else None,
        notes=tuple(notes),
    )


def reports_by_round(records: Sequence[EvalRecord], rounds: int) -> list[MetricReport]:
    """One report per debug round, as if evaluation had stopped there."""
    tested = [r for r in records if not r.untested]
    if not tested:
        raise EmptyEvaluation("no tested records")
    out = []
    for i in range(rounds + 1):
        c, e, u = cumulative_counts(tested, i)
        out.append(MetricReport(len(tested), c, e, u, {i: (c, e, u)}, untested=len(records) - len(tested)))
    return out


@dataclass(frozen=True)
class CurveRow:
    round: int
    compile_count: int
    execute_count: int
    unit_count: int
    compile_rate: Decimal
    execute_rate: Decimal
    unit_rate: Decimal


def debug_curve(reports: Sequence[MetricReport]) -> list[CurveRow]:
    """Per-round success table; raises if any cumulative count decreases."""
    if not reports:
        raise EmptyEvaluation("no rounds")
    rows: list[CurveRow] = []
    for i, rep in enumerate(reports):
        if rows:
            prev = rows[-1]
            for name in ("compile_count", "execute_count", "unit_count"):
                if getattr(rep, name) < getattr(prev, name):
                    raise ConsistencyError(
                        f"{name} fell from {getattr(prev, name)} to {getattr(rep, name)} at round {i}"
                    )
        rows.append(
            CurveRow(i, rep.compile_count, rep.execute_count, rep.unit_count,
                     rep.compile_rate, rep.execute_rate, rep.unit_rate)
        )
    return rows


def curve_csv(rows: Sequence[CurveRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["round", "compile_count", "execute_count", "unit_count",
                     "compile_rate", "execute_rate", "unit_rate"])
    for row in rows:
        writer.writerow([row.round, row.compile_count, row.execute_count, row.unit_count,
                         row.compile_rate, row.execute_rate, row.unit_rate])
    return buf.getvalue()


def curve_table(rows: Sequence[CurveRow]) -> str:
    lines = ["round  compile   execute   unit"]
    for r in rows:
        lines.append(f"{r.round:<5}  {str(r.compile_rate) + '%':<8}  {str(r.execute_rate) + '%':<8}  {r.unit_rate}%")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# evaluating one candidate


def _executed(run: RunOutcome) -> bool:
    if run.timed_out:
        return False
    if run.exit_code >= 0:
        return True
    # a failed assert still ran the tests; other signals are crashes
    return run.exit_code == -signal.SIGABRT and "Assertion" in run.stderr


def _classify(run: RunOutcome, require_summary: bool) -> tuple[bool, bool]:
    executed = _executed(run)
    passed = executed and run.exit_code == 0
    if passed and require_summary:
        passed = parse_summary(run.stdout) is not None
    return executed, passed


def merge_harness(candidate: str, harness: str | None, rule: str) -> str:
    if rule not in MERGE_RULES:
        raise ValueError(f"unknown merge rule {rule!r}; expected one of {MERGE_RULES}")
    if rule == "none" or not harness:
        return candidate
    return candidate.rstrip("\n") + "\n\n" + harness


def evaluate_one(
    candidate: str,
    language: SourceLanguage | str,
    sandbox: Sandbox,
    *,
    harness: str | None = None,
    merge: str = "append",
    debug_rounds: int = 0,
    gateway: Gateway | None = None,
    sample_id: str = "sample",
    reference: str | None = None,
    require_summary: bool = False,
) -> EvalRecord:
    """Compile, run and test ``candidate``; on compile failure ask for a fix.

    Round 0 evaluates the candidate as given.  Each further round sends the
    code and the compiler diagnostics back through ``gateway`` and evaluates
    the regenerated program.  Debug rounds share one fresh dialogue memory.
    """
    if debug_rounds < 0:
        raise ValueError("debug_rounds must be >= 0")
    if debug_rounds > 0 and gateway is None:
        raise ValueError("a gateway is required when debug_rounds > 0")
    language = SourceLanguage(language)
    memory = DialogueMemory(token_budget=gateway.token_budget) if gateway else None
    code = candidate
    for round_index in range(debug_rounds + 1):
        try:
            compiled, run = sandbox.compile_and_run(
                merge_harness(code, harness, merge), language, sample_id, "evaluate", round_index
            )
        except ToolchainMissing as exc:
            return EvalRecord(sample_id, False, False, False, untested=True,
                              debug_rounds=round_index, note=str(exc))
        if compiled.success:
            executed, passed = _classify(run, require_summary)
            score = codebleu(code, reference, language) if reference else None
            return EvalRecord(sample_id, True, executed, passed, round_index, score, debug_rounds=round_index)
        if round_index == debug_rounds:
            break
        prompt = gateway.render("debug_regenerate", {
            "language_name": language.display_name,
            "fence_tag": language.fence_tag,
            "code": code,
            "compiler_error": tail(compiled.stderr),
        })
        reply = gateway.complete(memory, prompt, stage_tag="debug")
        try:
            code = extract_code_block(reply, language.fence_tag)
        except BlockNotFound:
            log.info("%s: debug round %d returned no code block", sample_id, round_index + 1)
    score = codebleu(code, reference, language) if reference else None
    return EvalRecord(sample_id, False, False, False, None, score, debug_rounds=debug_rounds)


@dataclass
class EvalJob:
    sample_id: str
    candidate: str
    language: SourceLanguage
    reference: str | None = None
    harness: str | None = None


def evaluate_many(
    jobs: Sequence[EvalJob],
    sandbox: Sandbox,
    *,
    debug_rounds: int = 0,
    gateway: Gateway | None = None,
    merge: str = "append",
    require_summary: bool = False,
    workers: int = 1,
) -> list[EvalRecord]:
    def one(job: EvalJob) -> EvalRecord:
        return evaluate_one(
            job.candidate, job.language, sandbox, harness=job.harness, merge=merge,
            debug_rounds=debug_rounds, gateway=gateway, sample_id=job.sample_id,
            reference=job.reference, require_summary=require_summary,
        )

    if workers <= 1:
        return [one(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, jobs))
