"""Dialogue persistence, the three supervision formats, and dataset splits.

Every JSONL line carries ``schema_version`` and ``kind``.  Dialogues use the
chat-SFT ``conversations`` layout (``human`` / ``assistant`` roles).

Note on ``qs_pair_level`` splits: pairs are shuffled across dialogues, so
sibling pairs from one dialogue can land in different splits.  That leakage
is deliberate; use ``dialogue_level`` when it matters.
"""

from __future__ import annotations

import json
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

SCHEMA_VERSION = 1

CODE_PAIRS_FILE = "code_pairs.jsonl"
DIALOGUES_FILE = "dialogues.jsonl"
QS_PAIRS_FILE = "qs_pairs.jsonl"
REJECTED_FILE = "dialogues.rejected.jsonl"


class StoreError(Exception):
    pass


class CorruptDialogue(StoreError):
    pass


class VersionError(StoreError):
    pass


class ParseError(StoreError):
    def __init__(self, path: Path | str, line: int, reason: str) -> None:
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


@dataclass
class Dialogue:
    id: str
    direction: tuple[str, str]
    turns: list[tuple[str, str]]
    accepted: bool
    rounds_used: dict[str, int] = field(default_factory=dict)
    failure_stage: str | None = None
    origin_index: int = 0
    final_source: str | None = None
    final_target: str | None = None
    untested_stages: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.direction = tuple(self.direction)
        self.turns = [tuple(t) for t in self.turns]
        if not self.turns:
            raise ValueError(f"dialogue {self.id} has no turns")
        for q, s in self.turns:
            if not q or not s:
                raise ValueError(f"dialogue {self.id} has an empty question or solution")

    def to_record(self) -> dict:
        conversations = []
        for q, s in self.turns:
            conversations.append({"role": "human", "content": q})
            conversations.append({"role": "assistant", "content": s})
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "dialogue",
            "id": self.id,
            "direction": list(self.direction),
            "origin_index": self.origin_index,
            "accepted": self.accepted,
            "failure_stage": self.failure_stage,
            "rounds_used": dict(self.rounds_used),
            "untested_stages": list(self.untested_stages),
            "final_source": self.final_source,
            "final_target": self.final_target,
            "conversations": conversations,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Dialogue":
        conv = rec["conversations"]
        if len(conv) % 2 or any(
            c["role"] != ("human" if i % 2 == 0 else "assistant") for i, c in enumerate(conv)
        ):
            raise ValueError("conversations must alternate human/assistant")
        turns = [(conv[i]["content"], conv[i + 1]["content"]) for i in range(0, len(conv), 2)]
        return cls(
            id=rec["id"],
            direction=tuple(rec["direction"]),
            turns=turns,
            accepted=rec["accepted"],
            rounds_used=dict(rec.get("rounds_used", {})),
            failure_stage=rec.get("failure_stage"),
            origin_index=rec.get("origin_index", 0),
            final_source=rec.get("final_source"),
            final_target=rec.get("final_target"),
            untested_stages=list(rec.get("untested_stages", [])),
        )


@dataclass
class CodePair:
    source_code: str
    target_code: str
    dialogue_id: str
    direction: tuple[str, str] = ("", "")

    def __post_init__(self) -> None:
        self.direction = tuple(self.direction)

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "code_pair",
            "dialogue_id": self.dialogue_id,
            "direction": list(self.direction),
            "source_code": self.source_code,
            "target_code": self.target_code,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CodePair":
        return cls(rec["source_code"], rec["target_code"], rec["dialogue_id"], tuple(rec.get("direction", ("", ""))))


@dataclass
class QSPair:
    context: list[tuple[str, str]]
    question: str
    solution: str
    dialogue_id: str
    turn_index: int

    def __post_init__(self) -> None:
        self.context = [tuple(t) for t in self.context]
        if self.turn_index < 1:
            raise ValueError("turn_index starts at 1")
        if len(self.context) != self.turn_index - 1:
            raise ValueError("context must hold exactly the preceding turns")

    def to_record(self) -> dict:
        conversations = []
        for q, s in self.context:
            conversations.append({"role": "human", "content": q})
            conversations.append({"role": "assistant", "content": s})
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "qs_pair",
            "dialogue_id": self.dialogue_id,
            "turn_index": self.turn_index,
            "context": conversations,
            "question": self.question,
            "solution": self.solution,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QSPair":
        ctx = rec["context"]
        context = [(ctx[i]["content"], ctx[i + 1]["content"]) for i in range(0, len(ctx), 2)]
        return cls(context, rec["question"], rec["solution"], rec["dialogue_id"], rec["turn_index"])


Record = Union[Dialogue, CodePair, QSPair]
_KINDS = {"dialogue": Dialogue, "code_pair": CodePair, "qs_pair": QSPair}


def to_code_pair(d: Dialogue) -> CodePair | None:
    if not d.accepted:
        return None
    if not d.final_source or not d.final_target:
        raise CorruptDialogue(f"accepted dialogue {d.id} lacks its final programs")
    return CodePair(d.final_source, d.final_target, d.id, d.direction)


def explode_qs(d: Dialogue) -> list[QSPair]:
    return [
        QSPair(list(d.turns[: i - 1]), q, s, d.id, i) for i, (q, s) in enumerate(d.turns, start=1)
    ]


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitSpec:
    """How to partition a dataset.

    ``ratios`` maps split name to fraction (dialogue_level, qs_pair_level).
    ``ranges`` maps split name to a half-open ``(start, stop)`` interval over
    dialogue positions in origin-index order (``stop=None`` means the end);
    set ``range_key="origin_index"`` to use raw source indices instead.
    """

    kind: str
    ratios: dict[str, float] = field(default_factory=dict)
    ranges: dict[str, tuple[int, int | None]] = field(default_factory=dict)
    seed: int = 0
    range_key: str = "position"

    def __post_init__(self) -> None:
        if self.kind not in ("dialogue_level", "qs_pair_level", "index_range"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind == "index_range":
            if not self.ranges:
                raise ValueError("index_range split needs ranges")
            if self.range_key not in ("position", "origin_index"):
                raise ValueError(f"unknown range key {self.range_key!r}")
            spans = sorted((lo, math.inf if hi is None else hi) for lo, hi in self.ranges.values())
            for lo, hi in spans:
                if lo < 0 or hi < lo:
                    raise ValueError(f"invalid range [{lo}, {hi})")
            for (_, hi), (lo, _) in zip(spans, spans[1:]):
                if lo < hi:
                    raise ValueError("split ranges overlap")
        else:
            if not self.ratios:
                raise ValueError(f"{self.kind} split needs ratios")
            if any(r < 0 for r in self.ratios.values()):
                raise ValueError("split ratios must be non-negative")
            if abs(sum(self.ratios.values()) - 1.0) > 1e-9:
                raise ValueError(f"split ratios sum to {sum(self.ratios.values())}, not 1")


def _partition(items: list, ratios: dict[str, float]) -> dict[str, list]:
    out: dict[str, list] = {}
    n = len(items)
    cumulative = 0.0
    start = 0
    names = list(ratios)
    for k, name in enumerate(names):
        cumulative += ratios[name]
        stop = n if k == len(names) - 1 else int(round(cumulative * n))
        out[name] = items[start:stop]
        start = stop
    return out


def split_dialogues(ds: Sequence[Dialogue], spec: SplitSpec) -> dict[str, list]:
    """Partition dialogues (or, for ``qs_pair_level``, their QS pairs)."""
    if spec.kind == "index_range":
        ordered = sorted(ds, key=lambda d: (d.origin_index, d.id))
        out: dict[str, list] = {name: [] for name in spec.ranges}
        for position, d in enumerate(ordered):
            key = position if spec.range_key == "position" else d.origin_index
            for name, (lo, hi) in spec.ranges.items():
                if lo <= key and (hi is None or key < hi):
                    out[name].append(d)
                    break
        return out
    rng = random.Random(spec.seed)
    if spec.kind == "dialogue_level":
        items: list = sorted(ds, key=lambda d: d.id)
    else:
        items = [p for d in sorted(ds, key=lambda d: d.id) for p in explode_qs(d)]
    rng.shuffle(items)
    return _partition(items, spec.ratios)


# ---------------------------------------------------------------------------
# JSONL persistence


def write_store(records: Iterable[Record], path: Path | str) -> int:
    """Write records atomically (temp file then rename); returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_record(), ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return count


def read_store(path: Path | str) -> list[Record]:
    path = Path(path)
    records: list[Record] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "record is not an object")
            version = obj.get("schema_version")
            if version != SCHEMA_VERSION:
                raise VersionError(f"{path}:{lineno}: schema_version {version!r}, expected {SCHEMA_VERSION}")
            cls = _KINDS.get(obj.get("kind"))
            if cls is None:
                raise ParseError(path, lineno, f"unknown record kind {obj.get('kind')!r}")
            try:
                records.append(cls.from_record(obj))
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise ParseError(path, lineno, f"invalid {obj['kind']} record ({exc})") from exc
    return records


def read_dialogues(run_dir: Path | str, include_rejected: bool = False) -> list[Dialogue]:
    run_dir = Path(run_dir)
    files = [run_dir / DIALOGUES_FILE]
    if include_rejected:
        files.append(run_dir / REJECTED_FILE)
    out: list[Dialogue] = []
    for f in files:
        if f.exists():
            out.extend(r for r in read_store(f) if isinstance(r, Dialogue))
    return out


def write_run_store(dialogues: Sequence[Dialogue], run_dir: Path | str) -> dict[str, int]:
    """Write all four run files from a dialogue population."""
    run_dir = Path(run_dir)
    accepted = [d for d in dialogues if d.accepted]
    rejected = [d for d in dialogues if not d.accepted]
    pairs = [p for p in (to_code_pair(d) for d in accepted) if p is not None]
    qs = [p for d in accepted for p in explode_qs(d)]
    return {
        "code_pairs": write_store(pairs, run_dir / CODE_PAIRS_FILE),
        "dialogues": write_store(accepted, run_dir / DIALOGUES_FILE),
        "qs_pairs": write_store(qs, run_dir / QS_PAIRS_FILE),
        "rejected": write_store(rejected, run_dir / REJECTED_FILE),
        "rejected_qs_pairs": sum(len(d.turns) for d in rejected),
    }


FORMATS = ("code_pair", "dialogue", "qs_pair")


def export_split(
    dialogues: Sequence[Dialogue], fmt: str, spec: SplitSpec, out_dir: Path | str
) -> dict[str, int]:
    """Write ``<out>/<fmt>.<split>.jsonl`` per split; returns per-split counts."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {', '.join(FORMATS)}")
    if spec.kind == "qs_pair_level" and fmt != "qs_pair":
        raise ValueError("qs_pair_level splits only apply to the qs_pair format")
    out_dir = Path(out_dir)
    if fmt == "code_pair":
        dialogues = [d for d in dialogues if d.accepted]
    splits = split_dialogues(dialogues, spec)
    counts = {}
    for name, items in splits.items():
        if fmt == "code_pair":
            records: list[Record] = [p for p in (to_code_pair(d) for d in items) if p is not None]
        elif fmt == "dialogue":
            records = list(items)
        elif spec.kind == "qs_pair_level":
            records = list(items)
        else:
            records = [p for d in items for p in explode_qs(d)]
        counts[name] = write_store(records, out_dir / f"{fmt}.{name}.jsonl")
    return counts
