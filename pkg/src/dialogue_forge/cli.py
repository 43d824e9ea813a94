"""Command line entry point: generate, export, evaluate, probe, report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from dialogue_forge import __version__
from dialogue_forge.corpus import (
    CorpusError,
    FilterEvent,
    PreprocessConfig,
    SourceLanguage,
    iter_corpus,
    parse_direction,
    preprocess,
)
from dialogue_forge.evaluator import (
    DEFAULT_DEBUG_ROUNDS,
    EmptyEvaluation,
    EvalJob,
    aggregate,
    curve_csv,
    curve_table,
    debug_curve,
    evaluate_many,
    reports_by_round,
)
from dialogue_forge.gateway import BackendConfig, BackendUnavailable, Gateway, ReplayMiss, make_backend
from dialogue_forge.pipeline import PipelineConfig, SampleResult, rejection_histogram, run_many
from dialogue_forge.sandbox import Sandbox, Toolchain
from dialogue_forge.store import (
    FORMATS,
    Dialogue,
    SplitSpec,
    StoreError,
    export_split,
    read_dialogues,
    read_store,
    write_run_store,
)

log = logging.getLogger("dialogue_forge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TOOLCHAIN = 3
EXIT_BACKEND = 4
EXIT_INTERRUPTED = 130

MANIFEST_FILE = "manifest.json"
PREPROCESS_LOG = "preprocess_log.jsonl"
JOURNAL_FILE = "journal.partial.jsonl"


class ConfigError(Exception):
    def __init__(self, problems: Sequence[str]) -> None:
        super().__init__("; ".join(problems))
        self.problems = list(problems)


# ---------------------------------------------------------------------------
# configuration


def parse_range(text: str) -> tuple[int, int | None]:
    """``"A:B"`` to a half-open interval; ``B`` may be ``end`` or empty."""
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ValueError(f"range {text!r} is not of the form A:B")
    start = int(lo) if lo.strip() else 0
    stop = None if hi.strip() in ("", "end") else int(hi)
    if start < 0 or (stop is not None and stop < start):
        raise ValueError(f"invalid range {text!r}")
    return start, stop


@dataclass
class ToolchainSettings:
    argv: list[str] | None = None
    compile_timeout: float = 30.0
    run_timeout: float = 10.0


@dataclass
class RunConfig:
    direction: str = "cpp->cuda"
    corpus: str | None = None
    ranges: list[str] = field(default_factory=lambda: ["0:end"])
    preprocess: dict[str, Any] = field(default_factory=dict)
    questioner: dict[str, Any] = field(default_factory=dict)
    solver: dict[str, Any] = field(default_factory=dict)
    toolchains: dict[str, dict[str, Any]] = field(default_factory=dict)
    pipeline: dict[str, Any] = field(default_factory=dict)
    out: str | None = None
    seed: int = 0
    scratch: str | None = None

    @classmethod
    def from_mapping(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        data = dict(data)
        if isinstance(data.get("ranges"), str):
            data["ranges"] = [data["ranges"]]
        return cls(**data)

    # typed views; each raises on bad input, collected by validate()

    def direction_pair(self) -> tuple[SourceLanguage, SourceLanguage]:
        return parse_direction(self.direction)

    def interval_list(self) -> list[tuple[int, int | None]]:
        return [parse_range(r) for r in self.ranges]

    def preprocess_config(self) -> PreprocessConfig:
        opts = dict(self.preprocess)
        if "dependency_allowlist" in opts:
            opts["dependency_allowlist"] = set(opts["dependency_allowlist"])
        return PreprocessConfig(**opts)

    def backend_config(self, role: str) -> BackendConfig:
        return BackendConfig(**getattr(self, role))

    def pipeline_config(self) -> PipelineConfig:
        opts = dict(self.pipeline)
        return PipelineConfig(direction=self.direction_pair(), **opts)

    def toolchain_objects(self) -> dict[SourceLanguage, Toolchain]:
        out = {}
        for lang, opts in self.toolchains.items():
            settings = ToolchainSettings(**opts)
            out[SourceLanguage(lang)] = Toolchain(
                SourceLanguage(lang), list(settings.argv or []), settings.compile_timeout, settings.run_timeout
            )
        return out

    def validate(self, need_corpus: bool = True, need_backend: bool = True) -> list[str]:
        problems: list[str] = []

        def check(label: str, fn) -> Any:
            try:
                return fn()
            except (ValueError, TypeError, KeyError) as exc:
                problems.append(f"{label}: {exc}")
                return None

        check("direction", self.direction_pair)
        check("ranges", self.interval_list)
        check("preprocess", self.preprocess_config)
        check("pipeline", self.pipeline_config)
        check("toolchains", self.toolchain_objects)
        if need_backend:
            for role in ("solver", "questioner"):
                if role == "questioner" and not self.questioner:
                    continue
                cfg = check(role, lambda r=role: self.backend_config(r))
                if cfg is not None:
                    problems.extend(f"{role}: {p}" for p in cfg.validate())
                    if cfg.kind == "replay" and cfg.replay_path and not Path(cfg.replay_path).is_file():
                        problems.append(f"{role}: replay fixture {cfg.replay_path} does not exist")
        if need_corpus:
            if not self.corpus:
                problems.append("corpus: no corpus path given")
            elif not Path(self.corpus).exists():
                problems.append(f"corpus: {self.corpus} does not exist")
            if not self.out:
                problems.append("out: no output directory given")
        if not isinstance(self.seed, int):
            problems.append("seed: must be an integer")
        return problems

    def snapshot(self) -> dict[str, Any]:
        """Config as recorded in the manifest; no secrets live in the config."""
        snap = {
            "direction": self.direction,
            "corpus": self.corpus,
            "ranges": list(self.ranges),
            "preprocess": {k: sorted(v) if isinstance(v, (set, list)) else v for k, v in self.preprocess.items()},
            "questioner": dict(self.questioner),
            "solver": dict(self.solver),
            "toolchains": self.toolchains,
            "pipeline": self.pipeline_config().snapshot(),
            "seed": self.seed,
        }
        return snap


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    try:
        data = yaml.safe_load(text)  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError([f"config {path} is not valid YAML/JSON: {exc}"]) from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError([f"config {path} must be a mapping"])
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    data = load_config(getattr(args, "config", None))
    cfg = RunConfig.from_mapping(data)
    if getattr(args, "direction", None):
        cfg.direction = args.direction
    if getattr(args, "corpus", None):
        cfg.corpus = args.corpus
    if getattr(args, "range", None):
        cfg.ranges = list(args.range)
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "replay", None):
        cfg.solver = {**cfg.solver, "kind": "replay", "replay_path": args.replay}
    if getattr(args, "workers", None):
        cfg.pipeline = {**cfg.pipeline, "worker_count": args.workers}
    if getattr(args, "compile_skip", False):
        cfg.pipeline = {**cfg.pipeline, "compile_skip": True}
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if not cfg.solver:
        cfg.solver = {"kind": "replay"}
    return cfg


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_json(path: Path, obj: Any) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _make_sandbox(cfg: RunConfig) -> Sandbox:
    return Sandbox(toolchains=cfg.toolchain_objects(), scratch_root=cfg.scratch)


# ---------------------------------------------------------------------------
# generate


def _in_ranges(index: int, intervals: list[tuple[int, int | None]]) -> bool:
    return any(lo <= index and (hi is None or index < hi) for lo, hi in intervals)


def _load_journal(path: Path) -> list[Dialogue]:
    if not path.exists():
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                out.append(Dialogue.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError):
                # a torn final line from an interrupted run
                log.warning("ignoring unreadable journal line in %s", path)
    return out


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    src_lang, tgt_lang = cfg.direction_pair()
    pconf = cfg.pipeline_config()
    intervals = cfg.interval_list()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    with _make_sandbox(cfg) as sandbox:
        availability = sandbox.probe_toolchains([src_lang, tgt_lang])
        missing = [lang.value for lang, ok in availability.items() if not ok]
        auto_skip = None
        if missing == ["cuda"] and not pconf.compile_skip:
            # CUDA-less hosts still exercise the rest of the pipeline
            pconf.compile_skip = True
            auto_skip = "cuda toolchain unavailable; CUDA stages run in compile-skip mode and are marked untested"
            print(f"warning: {auto_skip}", file=sys.stderr)
        if missing and not pconf.compile_skip:
            print(f"error: toolchain unavailable: {', '.join(missing)} (use --compile-skip)", file=sys.stderr)
            return EXIT_TOOLCHAIN

        solver_cfg = cfg.backend_config("solver")
        gateway = Gateway(make_backend(solver_cfg), solver_cfg, token_budget=pconf.token_budget)

        raws = list(iter_corpus(cfg.corpus, src_lang))
        upper = max((r.index for r in raws), default=-1) + 1
        for lo, hi in intervals:
            if (hi if hi is not None else lo) > upper:
                raise ConfigError([f"ranges: [{lo}, {hi}) exceeds corpus size {upper}"])
        raws = [r for r in raws if _in_ranges(r.index, intervals)]

        journal = out / JOURNAL_FILE
        previous = {d.id: d for d in read_dialogues(out, include_rejected=True)}
        previous.update((d.id, d) for d in _load_journal(journal))
        done_indices = {d.origin_index for d in previous.values()} | _filtered_indices(out / PREPROCESS_LOG)

        units, events = [], []
        for raw in raws:
            if raw.index in done_indices:
                continue
            result = preprocess(raw, cfg.preprocess_config(), gateway)
            if isinstance(result, FilterEvent):
                events.append(result)
            else:
                units.append(result)
        units = [u for u in units if u.id not in previous]
        _append_preprocess_log(out / PREPROCESS_LOG, events)

        stop = threading.Event()
        results: list[SampleResult] = []
        with open(journal, "a", encoding="utf-8") as jfh:

            def on_result(res: SampleResult) -> None:
                results.append(res)
                if res.dialogue is not None:
                    jfh.write(json.dumps(res.dialogue.to_record(), sort_keys=True, ensure_ascii=False) + "\n")
                    jfh.flush()
                mark = "accepted" if res.accepted else f"rejected at {res.failure_stage.value if res.failure_stage else '?'}"
                log.info("%s: %s", res.unit_id, mark)

            previous_handler = signal.getsignal(signal.SIGINT)

            def on_sigint(signum, frame):
                print("interrupt: finishing in-flight samples (press again to abort)", file=sys.stderr)
                stop.set()
                signal.signal(signal.SIGINT, previous_handler)

            in_main = threading.current_thread() is threading.main_thread()
            if in_main:
                signal.signal(signal.SIGINT, on_sigint)
            try:
                run_many(units, pconf, gateway, sandbox, on_result=on_result, stop=stop)
            finally:
                if in_main:
                    signal.signal(signal.SIGINT, previous_handler)

        for res in results:
            if res.dialogue is not None:
                previous[res.dialogue.id] = res.dialogue
        dialogues = sorted(previous.values(), key=lambda d: (d.origin_index, d.id))
        counts = write_run_store(dialogues, out)
        journal.unlink(missing_ok=True)

        interrupted = len(units) - len(results)
        backend_errors = [r for r in results if r.error and r.error.startswith("backend:")]
        histogram: dict[str, int] = {}
        for d in dialogues:
            if not d.accepted and d.failure_stage:
                histogram[d.failure_stage] = histogram.get(d.failure_stage, 0) + 1
        manifest = {
            "version": __version__,
            "config": cfg.snapshot(),
            "seed": cfg.seed,
            "toolchains": {lang.value: ok for lang, ok in sorted(availability.items(), key=lambda kv: kv[0].value)},
            "counts": {
                "accepted": sum(d.accepted for d in dialogues),
                "rejected": sum(not d.accepted for d in dialogues),
                "filtered": _count_filtered(out / PREPROCESS_LOG),
                "interrupted": interrupted,
                "backend_errors": len(backend_errors),
                "this_run": {
                    "accepted": sum(r.accepted for r in results),
                    "rejected": sum(not r.accepted for r in results),
                },
                **{f"store_{k}": v for k, v in counts.items()},
            },
            "rejection_histogram": dict(sorted(histogram.items())),
            "run_rejection_histogram": rejection_histogram(results),
            "untested": sum(bool(d.untested_stages) for d in dialogues),
            "compile_skip": pconf.compile_skip,
            "notes": [auto_skip] if auto_skip else [],
        }
        _write_json(out / MANIFEST_FILE, manifest)

    print(f"accepted: {manifest['counts']['accepted']}  rejected: {manifest['counts']['rejected']}"
          f"  filtered: {manifest['counts']['filtered']}")
    for stage, n in manifest["rejection_histogram"].items():
        print(f"  {stage}: {n}")
    if interrupted:
        print(f"interrupted: {interrupted} sample(s) not started; rerun to resume", file=sys.stderr)
        return EXIT_INTERRUPTED
    if backend_errors:
        print(f"error: backend failed for {len(backend_errors)} sample(s): {backend_errors[0].error}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def _append_preprocess_log(path: Path, events: list[FilterEvent]) -> None:
    existing = path.read_text(encoding="utf-8") if path.exists() else ""
    new = "".join(json.dumps(e.to_record(), sort_keys=True) + "\n" for e in events)
    _atomic_write_text(path, existing + new)


def _filtered_indices(path: Path) -> set[int]:
    if not path.exists():
        return set()
    lines = path.read_text(encoding="utf-8").splitlines()
    return {json.loads(line)["origin_index"] for line in lines if line.strip()}


def _count_filtered(path: Path) -> int:
    return len(_filtered_indices(path))


# ---------------------------------------------------------------------------
# export


_SPLIT_NAMES = {1: ["all"], 2: ["train", "test"], 3: ["train", "valid", "test"]}


def parse_split(text: str, seed: int = 0) -> SplitSpec:
    """Parse ``dialogue:0.8,0.1,0.1``, ``qs:train=0.9,test=0.1`` or ``range:0:3000,3000:end``."""
    kind, _, body = text.partition(":")
    kind = {"dialogue": "dialogue_level", "qs": "qs_pair_level", "range": "index_range",
            "origin": "index_range"}.get(kind, kind)
    parts = [p for p in body.split(",") if p.strip()]
    if not parts:
        raise ValueError(f"split {text!r} has no parts")
    named = all("=" in p for p in parts)
    if named:
        names = [p.split("=", 1)[0].strip() for p in parts]
        values = [p.split("=", 1)[1].strip() for p in parts]
    else:
        if len(parts) not in _SPLIT_NAMES:
            raise ValueError(f"name the splits (train=...) when giving {len(parts)} parts")
        names, values = _SPLIT_NAMES[len(parts)], [p.strip() for p in parts]
    if kind == "index_range":
        ranges = {n: parse_range(v) for n, v in zip(names, values)}
        key = "origin_index" if text.startswith("origin:") else "position"
        return SplitSpec("index_range", ranges=ranges, seed=seed, range_key=key)
    return SplitSpec(kind, ratios={n: float(v) for n, v in zip(names, values)}, seed=seed)


def cmd_export(args: argparse.Namespace) -> int:
    store = Path(args.store)
    if not store.is_dir():
        raise ConfigError([f"store {store} is not a directory"])
    try:
        spec = parse_split(args.split, args.seed)
    except ValueError as exc:
        raise ConfigError([f"split: {exc}"]) from exc
    formats = list(FORMATS) if args.format == "all" else [args.format]
    dialogues = read_dialogues(store, include_rejected=args.include_rejected)
    dest = Path(args.out or store / "export")
    summary = {}
    for fmt in formats:
        if spec.kind == "qs_pair_level" and fmt != "qs_pair":
            raise ConfigError([f"split {args.split!r} only applies to the qs_pair format"])
        counts = export_split(dialogues, fmt, spec, dest)
        summary[fmt] = counts
        print(f"{fmt}: " + "  ".join(f"{k}={v}" for k, v in counts.items()))
    _write_json(dest / "export_manifest.json", {
        "store": str(store), "split": args.split, "seed": args.seed, "counts": summary,
        "include_rejected": args.include_rejected,
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _load_programs(path: Path) -> list[tuple[str, str]]:
    """(id, code) pairs from a JSONL file or a directory of source files."""
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.is_file() and not p.name.startswith("."))
        return [(p.stem, p.read_text(encoding="utf-8")) for p in files]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            code = obj.get("code", obj.get("target_code"))
            if code is None:
                raise ConfigError([f"{path}:{lineno}: record has no 'code' or 'target_code' field"])
            out.append((str(obj.get("id", obj.get("dialogue_id", lineno))), code))
    return out


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    need_backend = args.debug_rounds > 0
    problems = cfg.validate(need_corpus=False, need_backend=need_backend)
    if args.debug_rounds < 0:
        problems.append("debug-rounds: must be >= 0")
    for label, p in (("candidates", args.candidates), ("references", args.references)):
        if p and not Path(p).exists():
            problems.append(f"{label}: {p} does not exist")
    if problems:
        raise ConfigError(problems)
    language = SourceLanguage(args.language) if args.language else cfg.direction_pair()[1]
    candidates = _load_programs(Path(args.candidates))
    references = _load_programs(Path(args.references)) if args.references else None
    if references is not None and len(references) != len(candidates):
        raise ConfigError([f"{len(candidates)} candidates but {len(references)} references"])
    harness = Path(args.harness).read_text(encoding="utf-8") if args.harness else None

    with _make_sandbox(cfg) as sandbox:
        if not sandbox.is_available(language) and not args.compile_skip:
            print(f"error: {language.value} toolchain unavailable (use --compile-skip)", file=sys.stderr)
            return EXIT_TOOLCHAIN
        gateway = None
        if need_backend:
            solver_cfg = cfg.backend_config("solver")
            gateway = Gateway(make_backend(solver_cfg), solver_cfg)
        jobs = [
            EvalJob(cid, code, language, references[i][1] if references else None, harness)
            for i, (cid, code) in enumerate(candidates)
        ]
        try:
            records = evaluate_many(
                jobs, sandbox, debug_rounds=args.debug_rounds, gateway=gateway, merge=args.merge,
                require_summary=args.require_summary, workers=cfg.pipeline.get("worker_count", 1),
            )
        except (BackendUnavailable, ReplayMiss) as exc:
            print(f"error: backend unavailable: {exc}", file=sys.stderr)
            return EXIT_BACKEND

    try:
        report = aggregate(records, rounds=args.debug_rounds)
        curve = debug_curve(reports_by_round(records, args.debug_rounds))
    except EmptyEvaluation as exc:
        print(f"nothing to report: {exc}", file=sys.stderr)
        return EXIT_OK
    print(report.to_table())
    print()
    print(curve_table(curve))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write_text(out / "report.json", report.to_json() + "\n")
        _atomic_write_text(out / "report.txt", report.to_table() + "\n")
        _atomic_write_text(out / "curve.csv", curve_csv(curve))
        _atomic_write_text(
            out / "records.jsonl", "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe and report


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    problems = [p for p in cfg.validate(need_corpus=False, need_backend=False)]
    if problems:
        raise ConfigError(problems)
    with _make_sandbox(cfg) as sandbox:
        availability = sandbox.probe_toolchains(list(SourceLanguage))
        for lang, ok in availability.items():
            argv = " ".join(sandbox.toolchains[lang].compile_argv_template)
            print(f"{lang.value:<8} {'available' if ok else 'missing':<10} {argv}")
    needed = cfg.direction_pair()
    if not all(availability[lang] for lang in needed) and not cfg.pipeline_config().compile_skip:
        return EXIT_TOOLCHAIN
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    target = Path(args.path)
    shown = False
    manifest = target / MANIFEST_FILE if target.is_dir() else target
    if manifest.is_file() and manifest.name == MANIFEST_FILE:
        data = json.loads(manifest.read_text(encoding="utf-8"))
        counts = data.get("counts", {})
        print(f"direction: {data.get('config', {}).get('direction')}")
        print(f"accepted: {counts.get('accepted', 0)}  rejected: {counts.get('rejected', 0)}"
              f"  filtered: {counts.get('filtered', 0)}")
        for stage, n in data.get("rejection_histogram", {}).items():
            print(f"  {stage}: {n}")
        print("toolchains: " + ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in data.get("toolchains", {}).items()))
        shown = True
    report = target / "report.json" if target.is_dir() else target
    if report.is_file() and report.name == "report.json":
        data = json.loads(report.read_text(encoding="utf-8"))
        total = data["total"]
        for key in ("compile", "execute", "unit"):
            print(f"{key:<8} {data[f'{key}_count']}/{total} ({data['rates'][key]}%)")
        shown = True
    if target.is_dir():
        for name in ("dialogues.jsonl", "dialogues.rejected.jsonl"):
            f = target / name
            if f.exists():
                try:
                    print(f"{name}: {len(read_store(f))} records")
                except StoreError as exc:
                    print(f"{name}: unreadable ({exc})")
                    return EXIT_CONFIG
                shown = True
    if not shown:
        raise ConfigError([f"{target}: no manifest, report or store found"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dialogue-forge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML or JSON run config")
        p.add_argument("--direction", help="fortran->cpp or cpp->cuda")
        p.add_argument("--compile-skip", action="store_true", help="mark stages untested when a toolchain is missing")

    gen = sub.add_parser("generate", help="run the dialogue pipeline over a corpus slice")
    common(gen)
    gen.add_argument("--corpus", help="JSONL corpus or directory of sources")
    gen.add_argument("--range", action="append", metavar="A:B", help="origin-index interval (repeatable)")
    gen.add_argument("--replay", metavar="FIXTURE", help="serve solver replies from a replay fixture")
    gen.add_argument("--workers", type=int, metavar="N")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", metavar="DIR", help="run directory")
    gen.set_defaults(func=cmd_generate)

    exp = sub.add_parser("export", help="write train/valid/test files from a run store")
    exp.add_argument("store", help="run directory")
    exp.add_argument("--format", required=True, choices=[*FORMATS, "all"])
    exp.add_argument("--split", default="dialogue:1.0",
                     help="dialogue:0.8,0.1,0.1 | qs:0.9,0.1 | range:0:3000,3000:end | origin:...")
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--include-rejected", action="store_true")
    exp.add_argument("--out", metavar="DIR")
    exp.set_defaults(func=cmd_export)

    ev = sub.add_parser("evaluate", help="score candidate translations")
    common(ev)
    ev.add_argument("candidates")
    ev.add_argument("references", nargs="?")
    ev.add_argument("--language", choices=[l.value for l in SourceLanguage])
    ev.add_argument("--harness", help="unit-test harness file merged into every candidate")
    ev.add_argument("--merge", choices=["append", "none"], default="append")
    ev.add_argument("--require-summary", action="store_true", help="unit pass needs a RESULT_OK line")
    ev.add_argument("--debug-rounds", type=int, default=0, metavar="N",
                    help=f"regeneration rounds after a compile failure (typical: {DEFAULT_DEBUG_ROUNDS})")
    ev.add_argument("--replay", metavar="FIXTURE")
    ev.add_argument("--workers", type=int, metavar="N")
    ev.add_argument("--out", metavar="DIR")
    ev.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("probe", help="check which compilers work")
    common(pr)
    pr.set_defaults(func=cmd_probe)

    rep = sub.add_parser("report", help="summarize a run directory or evaluation report")
    rep.add_argument("path")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, StoreError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendUnavailable as exc:
        print(f"error: backend unavailable: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
