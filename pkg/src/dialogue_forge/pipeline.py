"""The per-sample state machine.

Preprocess -> SplTestGen -> SplRefine -> InitTranslate -> TgtRefine ->
DuoVerify -> Accepted, with Rejected reachable from the failing stage.
Every Questioner/Solver exchange of every stage goes into one
:class:`DialogueMemory`, so rejected samples keep their full dialogue.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from dialogue_forge.corpus import SUPPORTED_DIRECTIONS, SourceLanguage, SourceUnit
from dialogue_forge.gateway import (
    BackendUnavailable,
    BlockNotFound,
    DialogueMemory,
    Gateway,
    ReplayMiss,
    extract_code_block,
    extract_repair_tags,
    parse_verdict,
)
from dialogue_forge.sandbox import (
    FEEDBACK_CHARS,
    Sandbox,
    ToolchainMissing,
    count_summaries,
    duo_compare,
    parse_summary,
    tail,
)
from dialogue_forge.store import Dialogue

logger = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    PREPROCESS = "Preprocess"
    SPL_TEST_GEN = "SplTestGen"
    SPL_REFINE = "SplRefine"
    INIT_TRANSLATE = "InitTranslate"
    TGT_REFINE = "TgtRefine"
    DUO_VERIFY = "DuoVerify"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"


STAGE_ORDER = [
    Stage.PREPROCESS,
    Stage.SPL_TEST_GEN,
    Stage.SPL_REFINE,
    Stage.INIT_TRANSLATE,
    Stage.TGT_REFINE,
    Stage.DUO_VERIFY,
]

# stages sharing one opening exchange; used for turn accounting
PHASES = [
    (Stage.SPL_TEST_GEN, Stage.SPL_REFINE),
    (Stage.INIT_TRANSLATE, Stage.TGT_REFINE),
    (Stage.DUO_VERIFY,),
]


@dataclass(frozen=True)
class DirectionProfile:
    spl_template: str
    translate_template: str
    verdict_template: str
    align_template: str
    duo_mode: str
    require_summary: bool


PROFILES = {
    (SourceLanguage.CPP, SourceLanguage.CUDA): DirectionProfile(
        "spl_tests_cpp", "translate_cuda_task", "duo_verdict", "duo_align", "summary_line", True
    ),
    (SourceLanguage.FORTRAN, SourceLanguage.CPP): DirectionProfile(
        "spl_tests_fortran", "translate_fortran_cpp", "duo_verdict_fortran", "duo_align_stdout", "full_stdout", False
    ),
}


@dataclass
class PipelineConfig:
    direction: tuple[SourceLanguage, SourceLanguage] = (SourceLanguage.CPP, SourceLanguage.CUDA)
    max_refine_rounds: int = 7
    duo_mode: str | None = None
    worker_count: int = 1
    compile_skip: bool = False
    token_budget: int = 32000

    def __post_init__(self) -> None:
        self.direction = (SourceLanguage(self.direction[0]), SourceLanguage(self.direction[1]))
        if self.direction not in SUPPORTED_DIRECTIONS:
            raise ValueError(f"unsupported direction {self.direction}")
        if self.max_refine_rounds < 1:
            raise ValueError("max_refine_rounds must be >= 1")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.duo_mode is None:
            self.duo_mode = self.profile.duo_mode
        if self.duo_mode not in ("summary_line", "full_stdout"):
            raise ValueError(f"unknown duo mode {self.duo_mode!r}")

    @property
    def profile(self) -> DirectionProfile:
        return PROFILES[self.direction]

    def snapshot(self) -> dict:
        return {
            "direction": [self.direction[0].value, self.direction[1].value],
            "max_refine_rounds": self.max_refine_rounds,
            "duo_mode": self.duo_mode,
            "worker_count": self.worker_count,
            "compile_skip": self.compile_skip,
            "token_budget": self.token_budget,
        }


@dataclass
class SampleResult:
    unit_id: str
    status: str
    dialogue: Dialogue | None
    verified_pair: tuple[str, str] | None = None
    failure_stage: Stage | None = None
    rounds_used: dict[Stage, int] = field(default_factory=dict)
    stages_reached: list[Stage] = field(default_factory=list)
    transcript: list[dict] = field(default_factory=list)
    untested_stages: list[Stage] = field(default_factory=list)
    error: str | None = None

    def __post_init__(self) -> None:
        if self.status not in ("accepted", "rejected"):
            raise ValueError(f"unknown status {self.status!r}")
        if self.status == "accepted" and (self.verified_pair is None or self.failure_stage is not None):
            raise ValueError("accepted results need a verified pair and no failure stage")

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"

    def to_record(self) -> dict:
        return {
            "unit_id": self.unit_id,
            "status": self.status,
            "failure_stage": self.failure_stage.value if self.failure_stage else None,
            "rounds_used": {s.value: n for s, n in self.rounds_used.items()},
            "stages_reached": [s.value for s in self.stages_reached],
            "untested_stages": [s.value for s in self.untested_stages],
            "verified_pair": list(self.verified_pair) if self.verified_pair else None,
            "dialogue": self.dialogue.to_record() if self.dialogue else None,
            "transcript": self.transcript,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, ensure_ascii=False)


def expected_turns(result: SampleResult) -> int:
    """Turns the dialogue must hold: one opening exchange per phase reached plus every round."""
    total = 0
    for phase in PHASES:
        if phase[0] in result.stages_reached:
            total += 1 + sum(result.rounds_used.get(s, 0) for s in phase)
    return total


# ---------------------------------------------------------------------------
# verification checks


CheckFn = Callable[[str], "tuple[bool, str]"]


class ProgramCheck:
    """Compile, run, and judge one program; every call is logged to ``transcript``.

    Passing means: compiled, exited 0 within the timeout, and (when
    ``require_summary``) printed a ``RESULT_OK checksum=`` line.
    """

    def __init__(
        self,
        sandbox: Sandbox,
        language: SourceLanguage,
        sample_id: str,
        stage: Stage,
        transcript: list[dict],
        require_summary: bool,
        compile_skip: bool,
    ) -> None:
        self.sandbox = sandbox
        self.language = language
        self.sample_id = sample_id
        self.stage = stage
        self.transcript = transcript
        self.require_summary = require_summary
        self.compile_skip = compile_skip
        self.untested = False
        self.calls = 0
        self.last_run = None

    def __call__(self, code: str) -> tuple[bool, str]:
        attempt = self.calls
        self.calls += 1
        event = {"event": "check", "stage": self.stage.value, "attempt": attempt, "language": self.language.value}
        if not code.strip():
            event.update(compiled=False, passed=False, note="no program")
            self.transcript.append(event)
            return False, "No program was provided."
        if not self.sandbox.is_available(self.language):
            if not self.compile_skip:
                raise ToolchainMissing(f"{self.language.value} toolchain is not available")
            self.untested = True
            event.update(untested=True, passed=True)
            self.transcript.append(event)
            return True, "UNTESTED: toolchain unavailable"
        compiled, run = self.sandbox.compile_and_run(code, self.language, self.sample_id, self.stage.value, attempt)
        self.last_run = run
        event["compiled"] = compiled.success
        if not compiled.success:
            event["passed"] = False
            self.transcript.append(event)
            return False, "Compilation failed with the following errors:\n" + tail(compiled.stderr)
        summary = parse_summary(run.stdout)
        event.update(
            exit_code=run.exit_code,
            timed_out=run.timed_out,
            summary=summary.checksum if summary else None,
            summary_lines=count_summaries(run.stdout),
            stdout_tail=tail(run.stdout, 512),
        )
        if run.timed_out:
            feedback = f"The program did not finish within the time limit.\nstdout:\n{run.stdout}"
            passed = False
        elif run.exit_code != 0:
            feedback = (
                f"The program exited with status {run.exit_code}.\n"
                f"stdout:\n{run.stdout}\nstderr:\n{run.stderr}"
            )
            passed = False
        elif self.require_summary and summary is None:
            feedback = (
                "The program ran but did not print the final summary line "
                f"`RESULT_OK checksum=<integer>`.\nstdout:\n{run.stdout}"
            )
            passed = False
        else:
            feedback = "All tests passed."
            passed = True
            if self.require_summary and event["summary_lines"] > 1:
                feedback = "All tests passed, but more than one summary line was printed."
        event["passed"] = passed
        self.transcript.append(event)
        return passed, tail(feedback, FEEDBACK_CHARS)


# ---------------------------------------------------------------------------
# stage operations


def _request_program(
    prompt: str, language: SourceLanguage, memory: DialogueMemory, gateway: Gateway, stage: Stage
) -> tuple[str, int]:
    """Send ``prompt`` and extract the fenced program, with one reprompt."""
    reply = gateway.complete(memory, prompt, stage.value)
    try:
        return extract_code_block(reply, language.fence_tag), 0
    except BlockNotFound:
        pass
    reprompt = gateway.render("reprompt_block", {"fence_tag": language.fence_tag})
    reply = gateway.complete(memory, reprompt, stage.value)
    return extract_code_block(reply, language.fence_tag), 1


def generate_spl_tests(
    unit: SourceUnit, memory: DialogueMemory, gateway: Gateway, template: str = "spl_tests_cpp"
) -> tuple[str, int]:
    """Ask for the source program with embedded tests; returns (program, reprompts)."""
    prompt = gateway.render(template, {"source_code": unit.code})
    return _request_program(prompt, unit.language, memory, gateway, Stage.SPL_TEST_GEN)


def initial_translate(
    source_program: str,
    memory: DialogueMemory,
    gateway: Gateway,
    target: SourceLanguage,
    template: str = "translate_cuda_task",
) -> tuple[str, int]:
    prompt = gateway.render(template, {"source_code": source_program})
    return _request_program(prompt, SourceLanguage(target), memory, gateway, Stage.INIT_TRANSLATE)


def refine_until_pass(
    initial_code: str,
    language: SourceLanguage,
    check: CheckFn,
    memory: DialogueMemory,
    gateway: Gateway,
    cap: int = 7,
    stage: Stage = Stage.SPL_REFINE,
) -> tuple[str, int, bool]:
    """Check, then repair with feedback until the check passes or ``cap`` rounds are spent.

    Round 0 only checks ``initial_code``.  Each later round is exactly one
    exchange; a reply without a usable fenced block still costs its round.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    language = SourceLanguage(language)

    def run_check(code: str) -> tuple[bool, str]:
        try:
            ok, text = check(code)
        except ToolchainMissing:
            raise
        except Exception as exc:  # check failures become feedback
            return False, f"Verification raised {type(exc).__name__}: {exc}"
        return ok, tail(text, FEEDBACK_CHARS)

    code = initial_code
    passed, feedback = run_check(code)
    rounds = 0
    while not passed and rounds < cap:
        prompt = gateway.render(
            "repair_program",
            {
                "language_name": language.display_name,
                "feedback": feedback,
                "fence_tag": language.fence_tag,
                "code": code,
            },
        )
        reply = gateway.complete(memory, prompt, stage.value)
        rounds += 1
        try:
            code = extract_code_block(reply, language.fence_tag)
        except BlockNotFound:
            feedback = tail(
                f"Your reply did not contain a ```{language.fence_tag} fenced block.\n" + feedback, FEEDBACK_CHARS
            )
            continue
        extract_repair_tags(reply)
        passed, feedback = run_check(code)
    return code, rounds, passed


def _result_line(check: ProgramCheck, mode: str) -> str:
    run = check.last_run
    if check.untested:
        return "UNTESTED (toolchain unavailable)"
    if run is None:
        return "(no output)"
    if mode == "summary_line":
        summary = parse_summary(run.stdout)
        return f"RESULT_OK checksum={summary.checksum}" if summary else tail(run.stdout, 512).strip() or "(no output)"
    return tail(run.stdout, 2048).strip() or "(no output)"


def duo_verify(
    source_program: str,
    target_program: str,
    sandbox: Sandbox,
    mode: str,
    *,
    direction: tuple[SourceLanguage, SourceLanguage] = (SourceLanguage.CPP, SourceLanguage.CUDA),
    sample_id: str = "sample",
    memory: DialogueMemory | None = None,
    gateway: Gateway | None = None,
    compile_skip: bool = False,
    transcript: list[dict] | None = None,
) -> tuple[bool | None, dict]:
    """Run both programs and compare their outputs.

    With a gateway, the verdict question is asked and, on mismatch, one
    alignment repair of the target is attempted before giving up.  Returns
    ``(matched, transcript)``; ``matched`` is None when a toolchain was
    skipped.  The transcript holds both outputs and the final target code.
    """
    src_lang, tgt_lang = direction
    log = transcript if transcript is not None else []
    src_check = ProgramCheck(sandbox, src_lang, sample_id, Stage.DUO_VERIFY, log, False, compile_skip)
    tgt_check = ProgramCheck(sandbox, tgt_lang, sample_id, Stage.DUO_VERIFY, log, False, compile_skip)
    src_ok, _ = src_check(source_program)
    tgt_ok, _ = tgt_check(target_program)

    def compare() -> bool | None:
        if src_check.untested or tgt_check.untested:
            return None
        if not (src_ok and tgt_ok):
            return False
        return duo_compare(src_check.last_run, tgt_check.last_run, mode)

    matched = compare()
    info: dict = {
        "event": "duo",
        "mode": mode,
        "source_output": _result_line(src_check, mode),
        "target_output": _result_line(tgt_check, mode),
        "matched": matched,
        "repaired": False,
    }
    if gateway is not None and memory is not None:
        profile = PROFILES[(src_lang, tgt_lang)]
        if profile.verdict_template == "duo_verdict":
            bindings = {"cpp_compile_result": info["source_output"], "cuda_compile_result": info["target_output"]}
        else:
            bindings = {"fortran_result": info["source_output"], "cpp_result": info["target_output"]}
        reply = gateway.complete(memory, gateway.render(profile.verdict_template, bindings), Stage.DUO_VERIFY.value)
        info["llm_verdict"] = parse_verdict(reply).value
        if matched is False:
            if profile.align_template == "duo_align":
                target_line = info["source_output"]
                bindings = {"target_line": target_line, "cpp_code": source_program, "cuda_code": target_program}
            else:
                bindings = {
                    "target_output": info["source_output"],
                    "fortran_code": source_program,
                    "cpp_code": target_program,
                }
            reply = gateway.complete(memory, gateway.render(profile.align_template, bindings), Stage.DUO_VERIFY.value)
            info["repaired"] = True
            info["repair_tags"] = extract_repair_tags(reply)
            try:
                target_program = extract_code_block(reply, tgt_lang.fence_tag)
            except BlockNotFound:
                info["repair_note"] = "no fenced block in repair reply"
            else:
                tgt_ok, _ = tgt_check(target_program)
                matched = compare()
                info["target_output_after_repair"] = _result_line(tgt_check, mode)
                info["matched"] = matched
    info["target_program"] = target_program
    log.append({k: v for k, v in info.items() if k != "target_program"})
    return matched, info


# ---------------------------------------------------------------------------
# sample driver


def run_sample(
    unit: SourceUnit, config: PipelineConfig, gateway: Gateway, sandbox: Sandbox
) -> SampleResult:
    src_lang, tgt_lang = config.direction
    profile = config.profile
    memory = DialogueMemory(token_budget=config.token_budget)
    transcript: list[dict] = []
    rounds: dict[Stage, int] = {}
    reached: list[Stage] = [Stage.PREPROCESS]
    untested: list[Stage] = []
    stage = Stage.PREPROCESS

    def finish(status: str, failure: Stage | None = None, pair=None, error: str | None = None) -> SampleResult:
        reached.append(Stage.ACCEPTED if status == "accepted" else Stage.REJECTED)
        turns = memory.exchanges()
        dialogue = None
        if turns:
            dialogue = Dialogue(
                id=unit.id,
                direction=(src_lang.value, tgt_lang.value),
                turns=turns,
                accepted=status == "accepted",
                rounds_used={s.value: n for s, n in rounds.items()},
                failure_stage=failure.value if failure else None,
                origin_index=unit.origin_index,
                final_source=pair[0] if pair else None,
                final_target=pair[1] if pair else None,
                untested_stages=[s.value for s in untested],
            )
        return SampleResult(
            unit_id=unit.id,
            status=status,
            dialogue=dialogue,
            verified_pair=pair,
            failure_stage=failure,
            rounds_used=dict(rounds),
            stages_reached=list(reached),
            transcript=transcript,
            untested_stages=list(untested),
            error=error,
        )

    def enter(next_stage: Stage) -> Stage:
        reached.append(next_stage)
        return next_stage

    def note_rounds(s: Stage, n: int) -> None:
        if n:
            rounds[s] = n

    def checker(language: SourceLanguage, s: Stage) -> ProgramCheck:
        return ProgramCheck(sandbox, language, unit.id, s, transcript, profile.require_summary, config.compile_skip)

    try:
        stage = enter(Stage.SPL_TEST_GEN)
        try:
            source_program, reprompts = generate_spl_tests(unit, memory, gateway, profile.spl_template)
        except BlockNotFound:
            note_rounds(stage, 1)
            transcript.append({"event": "extract_failed", "stage": stage.value})
            return finish("rejected", stage)
        note_rounds(stage, reprompts)

        stage = enter(Stage.SPL_REFINE)
        check = checker(src_lang, stage)
        source_program, n, passed = refine_until_pass(
            source_program, src_lang, check, memory, gateway, config.max_refine_rounds, stage
        )
        note_rounds(stage, n)
        if check.untested:
            untested.append(stage)
        if not passed:
            return finish("rejected", stage)

        stage = enter(Stage.INIT_TRANSLATE)
        try:
            target_program, reprompts = initial_translate(
                source_program, memory, gateway, tgt_lang, profile.translate_template
            )
        except BlockNotFound:
            note_rounds(stage, 1)
            transcript.append({"event": "extract_failed", "stage": stage.value})
            return finish("rejected", stage)
        note_rounds(stage, reprompts)

        stage = enter(Stage.TGT_REFINE)
        check = checker(tgt_lang, stage)
        target_program, n, passed = refine_until_pass(
            target_program, tgt_lang, check, memory, gateway, config.max_refine_rounds, stage
        )
        note_rounds(stage, n)
        if check.untested:
            untested.append(stage)
        if not passed:
            return finish("rejected", stage)

        stage = enter(Stage.DUO_VERIFY)
        matched, info = duo_verify(
            source_program,
            target_program,
            sandbox,
            config.duo_mode,
            direction=config.direction,
            sample_id=unit.id,
            memory=memory,
            gateway=gateway,
            compile_skip=config.compile_skip,
            transcript=transcript,
        )
        if info["repaired"]:
            note_rounds(stage, 1)
        if matched is None:
            untested.append(stage)
        elif not matched:
            return finish("rejected", stage)
        return finish("accepted", pair=(source_program, info["target_program"]))
    except (BackendUnavailable, ReplayMiss) as exc:
        transcript.append({"event": "backend_error", "stage": stage.value, "detail": str(exc)})
        return finish("rejected", stage, error=f"backend: {exc}")
    except ToolchainMissing as exc:
        transcript.append({"event": "toolchain_missing", "stage": stage.value, "detail": str(exc)})
        return finish("rejected", stage, error=f"toolchain: {exc}")


def run_many(
    units: Sequence[SourceUnit],
    config: PipelineConfig,
    gateway: Gateway,
    sandbox: Sandbox,
    on_result: Callable[[SampleResult], None] | None = None,
    stop: threading.Event | None = None,
) -> list[SampleResult]:
    """Run samples on a worker pool; results come back in input order.

    ``on_result`` is invoked from the calling thread only (single writer).
    Setting ``stop`` lets in-flight samples finish and skips the rest.
    """
    results: list[SampleResult] = []
    if config.worker_count == 1:
        for unit in units:
            if stop is not None and stop.is_set():
                break
            result = run_sample(unit, config, gateway, sandbox)
            results.append(result)
            if on_result:
                on_result(result)
        return results

    def job(unit: SourceUnit) -> SampleResult | None:
        if stop is not None and stop.is_set():
            return None
        return run_sample(unit, config, gateway, sandbox)

    with ThreadPoolExecutor(max_workers=config.worker_count) as pool:
        futures = [pool.submit(job, u) for u in units]
        try:
            for fut in futures:
                result = fut.result()
                if result is None:
                    continue
                results.append(result)
                if on_result:
                    on_result(result)
        except KeyboardInterrupt:
            if stop is not None:
                stop.set()
            for fut in futures:
                fut.cancel()
            raise
    return results


def rejection_histogram(results: Iterable[SampleResult]) -> dict[str, int]:
    hist: dict[str, int] = {}
    for r in results:
        if r.status == "rejected" and r.failure_stage is not None:
            hist[r.failure_stage.value] = hist.get(r.failure_stage.value, 0) + 1
    return dict(sorted(hist.items()))
