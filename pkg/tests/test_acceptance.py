"""The ten acceptance criteria, one test each, with their runtime budgets.

A summary line per criterion is printed at the end of the pytest run.
"""

import json
import random
import time
from decimal import Decimal
from pathlib import Path

import codebleu_oracle as oracle
import pytest
from test_evaluator import LANG_OF, NEAR_MISS, PROGRAMS
from toy import HAVE_GXX, Behaviour, ToySolver, recording, toy_sandbox, toy_unit_source, write_config, write_corpus

from dialogue_forge import cli
from dialogue_forge.corpus import SourceLanguage, SourceUnit
from dialogue_forge.evaluator import (
    EvalRecord,
    aggregate,
    codebleu,
    debug_curve,
    evaluate_one,
    percent,
    reports_by_round,
)
from dialogue_forge.evaluator.codebleu import dataflow_pairs, load_keywords, tokenize
from dialogue_forge.gateway import Gateway, ReplayBackend, ScriptedBackend
from dialogue_forge.pipeline import PipelineConfig, Stage, expected_turns, run_sample
from dialogue_forge.sandbox import RunOutcome, Sandbox, Toolchain, duo_compare
from dialogue_forge.store import (
    CodePair,
    Dialogue,
    QSPair,
    SplitSpec,
    explode_qs,
    export_split,
    read_dialogues,
    read_store,
    split_dialogues,
    write_run_store,
    write_store,
)

needs_gxx = pytest.mark.skipif(not HAVE_GXX, reason="g++ not installed")

CELLS = json.loads((Path(__file__).parent / "fixtures" / "published_cells.json").read_text())
CPP = SourceLanguage.CPP


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f}s, budget {self.seconds}s"


@pytest.fixture(scope="module")
def sandbox(tmp_path_factory):
    with toy_sandbox(scratch_root=tmp_path_factory.mktemp("acceptance")) as sb:
        yield sb


def toy(n):
    return SourceUnit.create(n, CPP, toy_unit_source(n))


def replay_fixture(plan, n, sandbox, path):
    scripted = ScriptedBackend(ToySolver(plan))
    run_sample(toy(n), PipelineConfig(), Gateway(scripted), sandbox)
    scripted.dump_fixture(path)
    return path


@pytest.mark.criterion(1, "rate arithmetic reproduces 59.05 / 91.56 / 60.23 at 2 decimals")
def test_criterion_1_rate_arithmetic():
    with Budget(1.0):
        for count, total, rate in [(385, 652, "59.05"), (597, 652, "91.56"), (318, 528, "60.23")]:
            assert str(percent(count, total)) == rate
            records = [EvalRecord(f"s{i}", i < count, False, False) for i in range(total)]
            assert aggregate(records).compile_rate == Decimal(rate)


@pytest.mark.criterion(2, "unit <= execute <= compile over 1000 random sets and all published triples")
def test_criterion_2_monotonicity():
    with Budget(5.0):
        rng = random.Random(2)
        for _ in range(1000):
            records = []
            for i in range(rng.randint(1, 50)):
                c = rng.random() < 0.8
                e = c and rng.random() < 0.9
                u = e and rng.random() < 0.7
                records.append(EvalRecord(f"s{i}", c, e, u))
            rep = aggregate(records)
            assert rep.unit_count <= rep.execute_count <= rep.compile_count <= rep.total
        assert len(CELLS) == 45
        for cell in CELLS:
            n, c, e, u = cell["total"], cell["compiled"], cell["executed"], cell["unit_passed"]
            rep = aggregate([EvalRecord(f"s{i}", i < c, i < e, i < u) for i in range(n)])
            assert rep.unit_count <= rep.execute_count <= rep.compile_count <= rep.total


@needs_gxx
@pytest.mark.criterion(3, "replayed sample: accepted, rounds {SplRefine:2, TgtRefine:1}, turn formula, byte-identical")
def test_criterion_3_determinism(sandbox, tmp_path):
    fixture = replay_fixture({1: Behaviour(spl_fixes_after=2, tgt_fixes_after=1)}, 1, sandbox, tmp_path / "f.jsonl")
    with Budget(5.0):
        runs = [
            run_sample(toy(1), PipelineConfig(), Gateway(ReplayBackend.from_file(fixture)), sandbox)
            for _ in range(2)
        ]
    first = runs[0]
    assert first.status == "accepted"
    assert first.rounds_used == {Stage.SPL_REFINE: 2, Stage.TGT_REFINE: 1}
    assert len(first.dialogue.turns) == expected_turns(first) == (1 + 2) + (1 + 1) + 1
    assert runs[0].to_json() == runs[1].to_json()


@needs_gxx
@pytest.mark.criterion(4, "always-failing repairs reject at exactly 7 rounds; no round 8")
def test_criterion_4_refinement_cap(sandbox, tmp_path):
    fixture = replay_fixture({2: Behaviour(spl_fixes_after=-1)}, 2, sandbox, tmp_path / "f.jsonl")
    with Budget(5.0):
        backend = ReplayBackend.from_file(fixture)
        r = run_sample(toy(2), PipelineConfig(), Gateway(backend), sandbox)
    assert r.status == "rejected" and r.failure_stage is Stage.SPL_REFINE
    assert r.rounds_used[Stage.SPL_REFINE] == 7
    repairs = [q for q, _ in r.dialogue.turns if "failed verification" in q]
    assert len(repairs) == 7
    checks = [e for e in r.transcript if e["event"] == "check" and e["stage"] == "SplRefine"]
    assert len(checks) == 8  # the initial program plus one per repair


@needs_gxx
@pytest.mark.criterion(5, "duo-test: equal summary lines match, unequal or missing mismatch, rejects persisted")
def test_criterion_5_duo_protocol(sandbox, tmp_path):
    with Budget(30.0):
        ok = RunOutcome(0, "noise\nRESULT_OK checksum=42\n", "")
        assert duo_compare(ok, RunOutcome(0, "RESULT_OK checksum=42\n", ""), "summary_line")
        assert not duo_compare(ok, RunOutcome(0, "RESULT_OK checksum=43\n", ""), "summary_line")
        assert not duo_compare(ok, RunOutcome(0, "done\n", ""), "summary_line")

        scripted = ScriptedBackend(ToySolver({4: Behaviour(tgt_checksum_off=True, align_fixes=False),
                                              3: Behaviour(tgt_checksum_off=True)}))
        results = [run_sample(toy(n), PipelineConfig(), Gateway(scripted), sandbox) for n in (0, 3, 4)]
        assert [r.status for r in results] == ["accepted", "accepted", "rejected"]
        assert results[2].failure_stage is Stage.DUO_VERIFY
        write_run_store([r.dialogue for r in results], tmp_path)
        rejected = read_store(tmp_path / "dialogues.rejected.jsonl")
        assert len(rejected) == 1 and rejected[0].failure_stage == "DuoVerify"
        assert rejected[0].turns == results[2].dialogue.turns


@needs_gxx
@pytest.mark.criterion(6, "sandbox ground truth: passing (T,T,T), failing assert (T,T,F), loop times out")
def test_criterion_6_sandbox_ground_truth(tmp_path):
    body = "#include <cassert>\nint twice(int x) { return 2 * x; }\n"
    with Sandbox(scratch_root=tmp_path) as sb:
        good = evaluate_one(body, CPP, sb, harness="int main() { assert(twice(2) == 4); }")
        bad = evaluate_one(body, CPP, sb, harness="int main() { assert(twice(2) == 5); }")
    assert (good.compiled, good.executed, good.unit_passed) == (True, True, True)
    assert (bad.compiled, bad.executed, bad.unit_passed) == (True, True, False)
    run_timeout = 1.0
    with Sandbox({CPP: Toolchain(CPP, run_timeout=run_timeout)}, scratch_root=tmp_path) as sb:
        loop = "int main() { volatile unsigned x = 0; for (;;) x++; }"
        compiled = sb.compile(loop, sb.toolchains[CPP], tmp_path / "loop")
        start = time.perf_counter()
        run = sb.execute(compiled, run_timeout)
        waited = time.perf_counter() - start
    assert run.timed_out and waited < run_timeout + 1.0


@pytest.mark.criterion(7, "formats: 1 code pair, 1 dialogue, T QS-pairs; round-trip; whole-dialogue splits; {4,3,5} -> 12")
def test_criterion_7_dataset_formats(tmp_path):
    with Budget(5.0):
        T = 4
        d = Dialogue("d0", ("cpp", "cuda"), [(f"q{t}", f"s{t}") for t in range(T)], True,
                     final_source="src", final_target="tgt")
        spec = SplitSpec("dialogue_level", ratios={"all": 1.0})
        assert export_split([d], "code_pair", spec, tmp_path) == {"all": 1}
        assert export_split([d], "dialogue", spec, tmp_path) == {"all": 1}
        assert export_split([d], "qs_pair", spec, tmp_path) == {"all": T}
        qs = read_store(tmp_path / "qs_pair.all.jsonl")
        assert all(isinstance(p, QSPair) and p.context == d.turns[: p.turn_index - 1] for p in qs)
        assert isinstance(read_store(tmp_path / "code_pair.all.jsonl")[0], CodePair)

        mixed = [Dialogue(f"m{i}", ("cpp", "cuda"), [("q", "s")] * (1 + i % 5), i % 4 != 0,
                          origin_index=i, final_source="a", final_target="b") for i in range(40)]
        write_store(mixed, tmp_path / "rt.jsonl")
        assert read_store(tmp_path / "rt.jsonl") == mixed

        parts = split_dialogues(mixed, SplitSpec("dialogue_level", ratios={"a": 0.7, "b": 0.3}, seed=5))
        owners = [{d.id for d in part} for part in parts.values()]
        assert not owners[0] & owners[1] and len(owners[0] | owners[1]) == 40

        fixture = [Dialogue(f"f{i}", ("cpp", "cuda"), [("q", "s")] * t, True, final_source="a", final_target="b")
                   for i, t in enumerate([4, 3, 5])]
        assert sum(len(explode_qs(f)) for f in fixture) == 12


@pytest.mark.criterion(8, "CodeBLEU: identity on 20 programs, near-miss components equal the oracle, weights sum to 1")
def test_criterion_8_codebleu():
    with Budget(10.0):
        assert len(PROGRAMS) == 20
        for path in PROGRAMS:
            code = path.read_text()
            assert abs(codebleu(code, code, LANG_OF[path.suffix]).combined - 1.0) <= 1e-9
        assert len(NEAR_MISS) == 10
        for lang, cand, ref in NEAR_MISS:
            c_tok, r_tok = tokenize(cand, lang), tokenize(ref, lang)
            kw = load_keywords(lang)
            s = codebleu(cand, ref, lang)
            assert abs(s.ngram - oracle.bleu(c_tok, r_tok)) <= 1e-9
            assert abs(s.weighted_ngram - oracle.keyword_bleu(c_tok, r_tok, kw)) <= 1e-9
            expected = oracle.edge_match(oracle.def_use_edges(cand, kw), oracle.def_use_edges(ref, kw))
            assert abs(s.dataflow_match - expected) <= 1e-9
            assert sorted(dataflow_pairs(c_tok, lang).elements()) == sorted(oracle.def_use_edges(cand, kw))
            assert abs(sum(s.weights) - 1.0) <= 1e-12


@needs_gxx
@pytest.mark.criterion(9, "debug rounds: compile success non-decreasing over rounds 0..3, rises at round 1")
def test_criterion_9_debug_curve(tmp_path):
    broken = "#include <cstdio>\nint main() { std::puts(\"RESULT_OK checksum=1\") }\n"
    fixed = "#include <cstdio>\nint main() { std::puts(\"RESULT_OK checksum=1\"); }\n"
    candidates = [fixed, broken, "int main() { return undefined_name; }"]

    def repair(prompt):
        return "```cpp\n" + (fixed if "checksum=1" in prompt else "int main() { return 1 }") + "\n```"

    scripted = ScriptedBackend(repair)
    with Sandbox(scratch_root=tmp_path) as sb:
        for i, c in enumerate(candidates):
            evaluate_one(c, CPP, sb, debug_rounds=3, gateway=Gateway(scripted), sample_id=f"c{i}")
        scripted.dump_fixture(tmp_path / "debug.jsonl")
        with Budget(30.0):
            replay = Gateway(ReplayBackend.from_file(tmp_path / "debug.jsonl"))
            records = [evaluate_one(c, CPP, sb, debug_rounds=3, gateway=replay, sample_id=f"c{i}")
                       for i, c in enumerate(candidates)]
    rows = debug_curve(reports_by_round(records, 3))
    compiled = [r.compile_count for r in rows]
    assert all(a <= b for a, b in zip(compiled, compiled[1:]))
    assert compiled[1] > compiled[0]
    assert compiled == [1, 2, 2, 2]


@needs_gxx
@pytest.mark.criterion(10, "end-to-end: 5 toy units through generate + all three exports in < 60 s")
def test_criterion_10_end_to_end(tmp_path):
    corpus = write_corpus(tmp_path / "corpus.jsonl")
    config = write_config(tmp_path / "run.yaml", corpus)
    fixture = tmp_path / "fixture.jsonl"
    with recording(ToySolver(), fixture):
        assert cli.main(["generate", "--config", str(config), "--replay", str(fixture),
                         "--out", str(tmp_path / "rec")]) == 0
    out = tmp_path / "run"
    with Budget(60.0):
        assert cli.main(["generate", "--config", str(config), "--replay", str(fixture), "--out", str(out)]) == 0
        assert cli.main(["export", str(out), "--format", "all", "--split", "dialogue:0.6,0.2,0.2"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"]["accepted"] == 5 and manifest["counts"]["rejected"] == 0
    assert manifest["version"] and manifest["config"]["direction"] == "cpp->cuda"
    assert len(read_dialogues(out)) == 5
    for name in ("code_pairs.jsonl", "dialogues.jsonl", "qs_pairs.jsonl", "dialogues.rejected.jsonl"):
        read_store(out / name)
    for fmt in ("code_pair", "dialogue", "qs_pair"):
        total = sum(len(read_store(out / "export" / f"{fmt}.{s}.jsonl")) for s in ("train", "valid", "test"))
        assert total == (5 if fmt != "qs_pair" else manifest["counts"]["store_qs_pairs"])
