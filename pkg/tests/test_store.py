import json
import tempfile
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dialogue_forge.store import (
    CODE_PAIRS_FILE,
    DIALOGUES_FILE,
    QS_PAIRS_FILE,
    REJECTED_FILE,
    CodePair,
    CorruptDialogue,
    Dialogue,
    ParseError,
    QSPair,
    SplitSpec,
    VersionError,
    explode_qs,
    export_split,
    read_dialogues,
    read_store,
    split_dialogues,
    to_code_pair,
    write_run_store,
    write_store,
)


def dialogue(i, turns=2, accepted=True, origin=None):
    return Dialogue(
        id=f"d{i:05d}",
        direction=("cpp", "cuda"),
        turns=[(f"q{i}.{t} ünïcode", f"s{i}.{t}\n```cpp\nint x;\n```") for t in range(turns)],
        accepted=accepted,
        rounds_used={"SplRefine": 1} if turns > 3 else {},
        failure_stage=None if accepted else "SplRefine",
        origin_index=i if origin is None else origin,
        final_source=f"src{i}" if accepted else None,
        final_target=f"tgt{i}" if accepted else None,
    )


def test_round_trip_mixed_records(tmp_path):
    records = []
    for i in range(100):
        d = dialogue(i, turns=1 + i % 4, accepted=i % 5 != 0)
        records.append([d, to_code_pair(d) if d.accepted else d, explode_qs(d)[-1]][i % 3])
    path = tmp_path / "mixed.jsonl"
    assert write_store(records, path) == 100
    assert read_store(path) == records
    assert not (tmp_path / "mixed.jsonl.tmp").exists()


def test_truncated_last_line_names_line(tmp_path):
    path = tmp_path / "x.jsonl"
    write_store([dialogue(i) for i in range(3)], path)
    text = path.read_text()
    path.write_text(text[: len(text) - 20])
    with pytest.raises(ParseError) as err:
        read_store(path)
    assert err.value.line == 3 and ":3:" in str(err.value)


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.jsonl"
    rec = dialogue(0).to_record()
    rec["schema_version"] = 99
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(VersionError):
        read_store(path)


def test_unknown_kind_and_bad_shape(tmp_path):
    path = tmp_path / "k.jsonl"
    path.write_text(json.dumps({"schema_version": 1, "kind": "nope"}) + "\n")
    with pytest.raises(ParseError):
        read_store(path)
    rec = dialogue(0).to_record()
    rec["conversations"] = rec["conversations"][:1]
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(ParseError):
        read_store(path)


def test_dialogue_validation():
    with pytest.raises(ValueError):
        Dialogue("d", ("cpp", "cuda"), [], True)
    with pytest.raises(ValueError):
        Dialogue("d", ("cpp", "cuda"), [("q", "")], True)


def test_explode_single_turn():
    pairs = explode_qs(dialogue(0, turns=1))
    assert len(pairs) == 1 and pairs[0].context == [] and pairs[0].turn_index == 1


def test_explode_four_turns():
    d = dialogue(0, turns=4)
    pairs = explode_qs(d)
    assert [p.turn_index for p in pairs] == [1, 2, 3, 4]
    assert pairs[2].context == d.turns[:2]
    assert (pairs[2].question, pairs[2].solution) == d.turns[2]


def test_explode_counts_sum():
    ds = [dialogue(i, turns=t) for i, t in enumerate([4, 3, 5])]
    assert sum(len(explode_qs(d)) for d in ds) == 12


def test_qs_pair_context_validation():
    with pytest.raises(ValueError):
        QSPair([("a", "b")], "q", "s", "d", 1)
    with pytest.raises(ValueError):
        QSPair([], "q", "s", "d", 0)


def test_code_pairs_only_from_accepted():
    ds = [dialogue(i, accepted=i % 2 == 0) for i in range(10)]
    pairs = [p for p in map(to_code_pair, ds) if p is not None]
    assert len(pairs) == 5 and all(p.source_code.startswith("src") for p in pairs)
    broken = dialogue(1)
    broken.final_target = None
    with pytest.raises(CorruptDialogue):
        to_code_pair(broken)


def test_one_code_pair_per_accepted_dialogue_at_scale():
    ds = [dialogue(i, turns=1) for i in range(3652)]
    assert sum(1 for d in ds if to_code_pair(d) is not None) == 3652


def test_dialogue_split_seeded():
    ds = [dialogue(i) for i in range(10)]
    spec = SplitSpec("dialogue_level", ratios={"train": 0.8, "test": 0.2}, seed=1)
    out = split_dialogues(ds, spec)
    assert (len(out["train"]), len(out["test"])) == (8, 2)
    assert not {d.id for d in out["train"]} & {d.id for d in out["test"]}
    again = split_dialogues(list(reversed(ds)), spec)
    assert [d.id for d in again["test"]] == [d.id for d in out["test"]]


def test_index_range_split():
    ds = [dialogue(i, turns=1, origin=2 * i) for i in range(3394)]
    spec = SplitSpec("index_range", ranges={"train": (0, 3000), "test": (3000, None)})
    out = split_dialogues(ds, spec)
    assert (len(out["train"]), len(out["test"])) == (3000, 394)
    by_origin = split_dialogues(
        ds, SplitSpec("index_range", ranges={"a": (0, 3000), "b": (3000, None)}, range_key="origin_index")
    )
    assert (len(by_origin["a"]), len(by_origin["b"])) == (1500, 1894)


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec("dialogue_level", ratios={"a": 0.5, "b": 0.4})
    with pytest.raises(ValueError):
        SplitSpec("dialogue_level", ratios={"a": 1.2, "b": -0.2})
    with pytest.raises(ValueError):
        SplitSpec("index_range", ranges={"a": (0, 10), "b": (5, 20)})
    with pytest.raises(ValueError):
        SplitSpec("random")
    with pytest.raises(ValueError):
        SplitSpec("index_range")


def test_qs_pair_level_split_counts():
    ds = [dialogue(i, turns=t) for i, t in enumerate([4, 3, 5])]
    out = split_dialogues(ds, SplitSpec("qs_pair_level", ratios={"train": 0.75, "test": 0.25}, seed=3))
    assert (len(out["train"]), len(out["test"])) == (9, 3)


def test_export_three_formats(tmp_path):
    d = dialogue(0, turns=3)
    spec = SplitSpec("dialogue_level", ratios={"all": 1.0})
    assert export_split([d], "code_pair", spec, tmp_path) == {"all": 1}
    assert export_split([d], "dialogue", spec, tmp_path) == {"all": 1}
    assert export_split([d], "qs_pair", spec, tmp_path) == {"all": 3}
    assert isinstance(read_store(tmp_path / "code_pair.all.jsonl")[0], CodePair)
    with pytest.raises(ValueError):
        export_split([d], "csv", spec, tmp_path)
    with pytest.raises(ValueError):
        export_split([d], "dialogue", SplitSpec("qs_pair_level", ratios={"all": 1.0}), tmp_path)


def test_write_run_store(tmp_path):
    ds = [dialogue(i, turns=1 + i % 3, accepted=i != 2) for i in range(5)]
    counts = write_run_store(ds, tmp_path)
    assert counts["dialogues"] == counts["code_pairs"] == 4 and counts["rejected"] == 1
    assert counts["qs_pairs"] == sum(len(d.turns) for d in ds if d.accepted)
    for name in (CODE_PAIRS_FILE, DIALOGUES_FILE, QS_PAIRS_FILE, REJECTED_FILE):
        assert (tmp_path / name).is_file()
    assert len(read_dialogues(tmp_path)) == 4
    assert len(read_dialogues(tmp_path, include_rejected=True)) == 5


def test_record_layout_is_chat_sft():
    rec = dialogue(0, turns=2).to_record()
    assert [c["role"] for c in rec["conversations"]] == ["human", "assistant"] * 2
    assert rec["schema_version"] == 1 and rec["kind"] == "dialogue"


_turn = st.tuples(st.text(min_size=1, max_size=20), st.text(min_size=1, max_size=20))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(_turn, min_size=1, max_size=6), min_size=1, max_size=8))
def test_explode_properties(all_turns):
    ds = [Dialogue(f"d{i}", ("cpp", "cuda"), t, True, final_source="s", final_target="t") for i, t in enumerate(all_turns)]
    pairs = [p for d in ds for p in explode_qs(d)]
    assert len(pairs) == sum(len(t) for t in all_turns)
    for d in ds:
        for p in explode_qs(d):
            assert p.context == d.turns[: p.turn_index - 1]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 60),
    st.lists(st.integers(1, 10), min_size=1, max_size=4),
    st.integers(0, 1000),
)
def test_split_partition_property(n, weights, seed):
    total = sum(weights)
    ratios = {f"s{i}": w / total for i, w in enumerate(weights)}
    ratios[f"s{len(weights) - 1}"] = 1.0 - sum(list(ratios.values())[:-1])
    ds = [dialogue(i, turns=1) for i in range(n)]
    out = split_dialogues(ds, SplitSpec("dialogue_level", ratios=ratios, seed=seed))
    ids = [d.id for part in out.values() for d in part]
    assert sorted(ids) == sorted(d.id for d in ds)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=10))
def test_round_trip_property(turn_counts):
    ds = [dialogue(i, turns=t, accepted=i % 3 != 1) for i, t in enumerate(turn_counts)]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.jsonl"
        write_store(ds, path)
        assert read_store(path) == ds
