"""Compile and run candidate programs in throwaway directories.

Isolation is a fresh working directory per attempt, wall-clock timeouts, a
minimal environment, and a cap on captured output.  An optional jail prefix
(e.g. ``["firejail", "--quiet"]``) is prepended to every command.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from dialogue_forge.corpus import SourceLanguage

logger = logging.getLogger(__name__)

TIMEOUT_EXIT_CODE = -signal.SIGKILL
FEEDBACK_CHARS = 4096

_SOURCE_SUFFIX = {
    SourceLanguage.CPP: ".cpp",
    SourceLanguage.CUDA: ".cu",
    SourceLanguage.FORTRAN: ".f90",
}

DEFAULT_ARGV = {
    SourceLanguage.CPP: ["g++", "-fopenmp", "-O2", "{src}", "-o", "{out}"],
    SourceLanguage.FORTRAN: ["gfortran", "-O2", "{src}", "-o", "{out}"],
    SourceLanguage.CUDA: ["nvcc", "-O2", "{src}", "-o", "{out}"],
}

_PROBE_PROGRAMS = {
    SourceLanguage.CPP: "int main() { return 0; }\n",
    SourceLanguage.CUDA: "int main() { return 0; }\n",
    SourceLanguage.FORTRAN: "program probe\nend program probe\n",
}

ENV_ALLOWLIST = ("PATH", "LANG", "LC_ALL", "LD_LIBRARY_PATH", "OMP_NUM_THREADS", "TMPDIR")


class SandboxError(RuntimeError):
    pass


class ToolchainMissing(SandboxError):
    pass


class ArtifactMissing(SandboxError):
    pass


@dataclass
class Toolchain:
    language: SourceLanguage
    compile_argv_template: list[str] = field(default_factory=list)
    compile_timeout: float = 30.0
    run_timeout: float = 10.0
    available: bool = False

    def __post_init__(self) -> None:
        self.language = SourceLanguage(self.language)
        if not self.compile_argv_template:
            self.compile_argv_template = list(DEFAULT_ARGV[self.language])
        for placeholder in ("{src}", "{out}"):
            hits = sum(arg.count(placeholder) for arg in self.compile_argv_template)
            if hits != 1:
                raise ValueError(
                    f"{self.language.value} compile command must contain {placeholder} exactly once"
                )

    def argv(self, src: str, out: str) -> list[str]:
        return [a.replace("{src}", src).replace("{out}", out) for a in self.compile_argv_template]


@dataclass
class CompileOutcome:
    success: bool
    stderr: str
    artifact_path: Path | None = None
    duration: float = 0.0
    workdir: Path | None = None


@dataclass
class RunOutcome:
    exit_code: int
    stdout: str
    stderr: str
    timed_out: bool = False
    duration: float = 0.0

    @property
    def ok(self) -> bool:
        return self.exit_code == 0 and not self.timed_out


@dataclass(frozen=True)
class SummaryLine:
    checksum: int


_SUMMARY = re.compile(r"^RESULT_OK checksum=([+-]?\d+)$")


def parse_summary(stdout: str) -> SummaryLine | None:
    """Checksum from the last ``RESULT_OK checksum=<integer>`` line, if any."""
    matches = []
    for line in stdout.splitlines():
        m = _SUMMARY.match(line.rstrip("\r"))
        if m:
            matches.append(int(m.group(1)))
    if not matches:
        return None
    if len(matches) > 1:
        logger.warning("MultipleSummaries: %d summary lines, using the last", len(matches))
    return SummaryLine(matches[-1])


def count_summaries(stdout: str) -> int:
    return sum(1 for line in stdout.splitlines() if _SUMMARY.match(line.rstrip("\r")))


def _normalize_stdout(text: str) -> str:
    return "\n".join(line.rstrip() for line in text.rstrip().splitlines())


def duo_compare(source_run: RunOutcome, target_run: RunOutcome, mode: str) -> bool:
    if mode == "summary_line":
        a, b = parse_summary(source_run.stdout), parse_summary(target_run.stdout)
        return a is not None and b is not None and a == b
    if mode == "full_stdout":
        return _normalize_stdout(source_run.stdout) == _normalize_stdout(target_run.stdout)
    raise ValueError(f"unknown duo mode {mode!r}")


def tail(text: str, limit: int = FEEDBACK_CHARS) -> str:
    return text if len(text) <= limit else text[-limit:]


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except ProcessLookupError:
        pass


def _read_capped(path: Path, cap: int) -> str:
    with open(path, "rb") as fh:
        data = fh.read(cap + 1)
    text = data[:cap].decode("utf-8", errors="replace")
    if len(data) > cap:
        text += "\n[output truncated]"
    return text


class Sandbox:
    """Runs compile and execute subprocesses under a scratch root.

    Attempt directories follow ``<scratch>/<sample_id>/<stage>/<attempt>/``
    and are removed after the result is captured unless ``keep_artifacts``.
    """

    def __init__(
        self,
        toolchains: Mapping[SourceLanguage, Toolchain] | None = None,
        scratch_root: Path | str | None = None,
        output_cap: int = 1 << 20,
        jail_prefix: Sequence[str] = (),
        max_processes: int = 4,
        keep_artifacts: bool = False,
    ) -> None:
        self.toolchains = {SourceLanguage(k): v for k, v in (toolchains or {}).items()}
        for lang in SourceLanguage:
            self.toolchains.setdefault(lang, Toolchain(lang))
        self._own_scratch = scratch_root is None
        self.scratch_root = Path(scratch_root or tempfile.mkdtemp(prefix="dialogue-forge-"))
        self.scratch_root.mkdir(parents=True, exist_ok=True)
        self.output_cap = output_cap
        self.jail_prefix = list(jail_prefix)
        self.keep_artifacts = keep_artifacts
        self._slots = threading.BoundedSemaphore(max(1, max_processes))
        self._probed: dict[SourceLanguage, bool] = {}
        self._probe_lock = threading.Lock()
        self.probe_processes = 0
        self._attempts = 0
        self._attempt_lock = threading.Lock()

    # -- toolchain probing ---------------------------------------------------

    def probe_toolchains(self, languages: Sequence[SourceLanguage] | None = None) -> dict[SourceLanguage, bool]:
        """Compile a trivial program per toolchain once; results are cached."""
        result = {}
        with self._probe_lock:
            for lang in languages or list(self.toolchains):
                lang = SourceLanguage(lang)
                if lang not in self._probed:
                    self._probed[lang] = self._probe_one(self.toolchains[lang])
                    self.toolchains[lang].available = self._probed[lang]
                result[lang] = self._probed[lang]
        return result

    def _probe_one(self, toolchain: Toolchain) -> bool:
        if shutil.which(toolchain.argv("x", "y")[0]) is None and not self.jail_prefix:
            return False
        workdir = Path(tempfile.mkdtemp(prefix="probe-", dir=self.scratch_root))
        try:
            self.probe_processes += 1
            toolchain.available = True
            outcome = self.compile(_PROBE_PROGRAMS[toolchain.language], toolchain, workdir)
            return outcome.success
        except (OSError, SandboxError):
            return False
        finally:
            toolchain.available = False
            shutil.rmtree(workdir, ignore_errors=True)

    def is_available(self, language: SourceLanguage) -> bool:
        return self.probe_toolchains([language])[SourceLanguage(language)]

    # -- subprocess plumbing -------------------------------------------------

    def _run(self, argv: list[str], cwd: Path, timeout: float, env: dict[str, str] | None) -> RunOutcome:
        out_path, err_path = cwd / ".stdout", cwd / ".stderr"
        start = time.monotonic()
        with self._slots, open(out_path, "wb") as out, open(err_path, "wb") as err:
            proc = subprocess.Popen(
                self.jail_prefix + argv,
                cwd=cwd,
                stdin=subprocess.DEVNULL,
                stdout=out,
                stderr=err,
                env=env,
                start_new_session=True,
            )
            timed_out = False
            try:
                proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                timed_out = True
                _kill_group(proc)
                proc.wait()
            # reap stray grandchildren holding the output files
            _kill_group(proc)
        duration = time.monotonic() - start
        stdout = _read_capped(out_path, self.output_cap)
        stderr = _read_capped(err_path, self.output_cap)
        exit_code = TIMEOUT_EXIT_CODE if timed_out else proc.returncode
        return RunOutcome(exit_code, stdout, stderr, timed_out, duration)

    def _minimal_env(self) -> dict[str, str]:
        return {k: os.environ[k] for k in ENV_ALLOWLIST if k in os.environ}

    # -- public operations ---------------------------------------------------

    def attempt_dir(self, sample_id: str, stage: str, attempt: int | None = None) -> Path:
        """A fresh, empty directory for one compile/run attempt."""
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", sample_id) or "sample"
        if attempt is None:
            with self._attempt_lock:
                self._attempts += 1
                attempt = self._attempts
        base = self.scratch_root / safe / stage
        path = base / str(attempt)
        suffix = 0
        while path.exists():
            suffix += 1
            path = base / f"{attempt}.{suffix}"
        path.mkdir(parents=True)
        return path

    def compile(self, code: str, toolchain: Toolchain, workdir: Path | str) -> CompileOutcome:
        if not toolchain.available:
            # first use of one of our own toolchains: probe it now
            own = self.toolchains.get(toolchain.language) is toolchain and toolchain.language not in self._probed
            if not (own and self.is_available(toolchain.language)):
                raise ToolchainMissing(f"{toolchain.language.value} toolchain is not available")
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        src = "main" + _SOURCE_SUFFIX[toolchain.language]
        (workdir / src).write_text(code, encoding="utf-8")
        out = "main.bin"
        # relative paths keep compiler diagnostics identical across workdirs
        try:
            run = self._run(toolchain.argv(src, out), workdir, toolchain.compile_timeout, None)
        except FileNotFoundError as exc:
            raise ToolchainMissing(str(exc)) from exc
        stderr = run.stderr
        if run.timed_out:
            stderr = f"TIMEOUT: compilation exceeded {toolchain.compile_timeout:g}s\n" + stderr
        artifact = workdir / out
        success = run.exit_code == 0 and not run.timed_out and artifact.is_file()
        return CompileOutcome(success, stderr, artifact if success else None, run.duration, workdir)

    def execute(self, outcome: CompileOutcome, run_timeout: float = 10.0) -> RunOutcome:
        if not outcome.success:
            raise SandboxError("refusing to execute the result of a failed compile")
        if outcome.artifact_path is None or not outcome.artifact_path.is_file():
            raise ArtifactMissing(str(outcome.artifact_path))
        artifact = outcome.artifact_path
        return self._run([str(artifact.resolve())], artifact.parent, run_timeout, self._minimal_env())

    def compile_and_run(
        self, code: str, language: SourceLanguage, sample_id: str, stage: str, attempt: int | None = None
    ) -> tuple[CompileOutcome, RunOutcome | None]:
        """Compile and (if successful) run ``code`` in a fresh attempt directory."""
        toolchain = self.toolchains[SourceLanguage(language)]
        if not self.is_available(language):
            raise ToolchainMissing(f"{SourceLanguage(language).value} toolchain is not available")
        workdir = self.attempt_dir(sample_id, stage, attempt)
        try:
            compiled = self.compile(code, toolchain, workdir)
            run = self.execute(compiled, toolchain.run_timeout) if compiled.success else None
            return compiled, run
        finally:
            if not self.keep_artifacts:
                shutil.rmtree(workdir, ignore_errors=True)

    def close(self) -> None:
        if self._own_scratch and not self.keep_artifacts:
            shutil.rmtree(self.scratch_root, ignore_errors=True)

    def __enter__(self) -> "Sandbox":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def probe_toolchains(sandbox: Sandbox) -> dict[SourceLanguage, bool]:
    return sandbox.probe_toolchains()
