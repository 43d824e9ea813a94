"""Corpus ingestion and preprocessing filters.

Raw source files become :class:`SourceUnit` objects only after passing the
comment stripper, the token cap, the dependency filter and (optionally) the
LLM self-containment check.  Units that fail a filter are reported through
:class:`FilterEvent` records with a reason code.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Sequence

if TYPE_CHECKING:
    from dialogue_forge.gateway import Gateway

logger = logging.getLogger(__name__)

ALLOWLIST_DIR = Path(__file__).parent / "data" / "allowlists"


class SourceLanguage(str, enum.Enum):
    FORTRAN = "fortran"
    CPP = "cpp"
    CUDA = "cuda"

    @property
    def display_name(self) -> str:
        return {"fortran": "Fortran", "cpp": "C++", "cuda": "CUDA"}[self.value]

    @property
    def fence_tag(self) -> str:
        return self.value


SUPPORTED_DIRECTIONS: frozenset[tuple[SourceLanguage, SourceLanguage]] = frozenset(
    {
        (SourceLanguage.FORTRAN, SourceLanguage.CPP),
        (SourceLanguage.CPP, SourceLanguage.CUDA),
    }
)

_EXTENSIONS = {
    ".f": SourceLanguage.FORTRAN,
    ".for": SourceLanguage.FORTRAN,
    ".f77": SourceLanguage.FORTRAN,
    ".f90": SourceLanguage.FORTRAN,
    ".f95": SourceLanguage.FORTRAN,
    ".f03": SourceLanguage.FORTRAN,
    ".f08": SourceLanguage.FORTRAN,
    ".c": SourceLanguage.CPP,
    ".cc": SourceLanguage.CPP,
    ".cpp": SourceLanguage.CPP,
    ".cxx": SourceLanguage.CPP,
    ".h": SourceLanguage.CPP,
    ".hpp": SourceLanguage.CPP,
    ".cu": SourceLanguage.CUDA,
    ".cuh": SourceLanguage.CUDA,
}


class CorpusError(Exception):
    """Base class for corpus errors."""


class MalformedSource(CorpusError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class RangeError(CorpusError, ValueError):
    pass


class VerdictUnparseable(CorpusError):
    pass


def parse_direction(text: str) -> tuple[SourceLanguage, SourceLanguage]:
    """Parse ``"fortran->cpp"`` / ``"cpp2cuda"`` style direction strings."""
    parts = re.split(r"\s*(?:->|→|2|:)\s*", text.strip().lower(), maxsplit=1)
    if len(parts) != 2:
        raise ValueError(f"cannot parse translation direction {text!r}")
    try:
        pair = (SourceLanguage(parts[0]), SourceLanguage(parts[1]))
    except ValueError as exc:
        raise ValueError(f"unknown language in direction {text!r}") from exc
    if pair not in SUPPORTED_DIRECTIONS:
        raise ValueError(
            f"unsupported direction {pair[0].value}->{pair[1].value}; "
            "supported: fortran->cpp, cpp->cuda"
        )
    return pair


@dataclass(frozen=True)
class SourceUnit:
    id: str
    origin_index: int
    language: SourceLanguage
    code: str
    token_count: int = -1

    def __post_init__(self) -> None:
        if self.origin_index < 0:
            raise ValueError("origin_index must be non-negative")
        if not self.code.strip():
            raise ValueError(f"unit {self.id} has empty code")
        expected = count_tokens(self.code)
        if self.token_count == -1:
            object.__setattr__(self, "token_count", expected)
        elif self.token_count != expected:
            raise ValueError(
                f"unit {self.id}: token_count {self.token_count} != {expected}"
            )

    @classmethod
    def create(cls, origin_index: int, language: SourceLanguage | str, code: str) -> "SourceUnit":
        language = SourceLanguage(language)
        digest = hashlib.sha1(code.encode("utf-8")).hexdigest()[:8]
        return cls(f"{language.value}-{origin_index:06d}-{digest}", origin_index, language, code)


@dataclass
class PreprocessConfig:
    max_tokens: int = 4000
    strip_comments: bool = True
    require_self_contained: bool = True
    dependency_allowlist: set[str] = field(default_factory=set)
    comment_mode: str = "lexer"  # "llm" asks the model instead (C family only)

    def __post_init__(self) -> None:
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.comment_mode not in ("lexer", "llm"):
            raise ValueError(f"comment_mode must be 'lexer' or 'llm', got {self.comment_mode!r}")


# ---------------------------------------------------------------------------
# comment stripping


def strip_comments(code: str, language: SourceLanguage | str) -> str:
    """Remove line and block comments, leaving string literals intact.

    Lines that held only a comment are dropped; lines that lost a trailing
    comment are right-stripped.  Every other line is returned unchanged.
    """
    language = SourceLanguage(language)
    if language is SourceLanguage.FORTRAN:
        pieces, touched = _lex_fortran(code)
    else:
        pieces, touched = _lex_c_family(code)
    out_lines = []
    for number, line in enumerate("".join(pieces).split("\n")):
        if number in touched:
            line = line.rstrip()
            if not line.strip():
                continue
        out_lines.append(line)
    return "\n".join(out_lines)


def _byte_offset(code: str, index: int) -> int:
    return len(code[:index].encode("utf-8"))


def _in_number(code: str, i: int) -> bool:
    # digit separator: the apostrophe sits inside a pp-number such as 1'000
    j = i
    while j > 0 and (code[j - 1].isalnum() or code[j - 1] in "_'."):
        j -= 1
    return j < i and code[j].isdigit() and i + 1 < len(code) and code[i + 1].isalnum()


def _lex_c_family(code: str) -> tuple[list[str], set[int]]:
    out: list[str] = []
    touched: set[int] = set()
    line = 0
    i, n = 0, len(code)
    while i < n:
        ch = code[i]
        if ch == "/" and code.startswith("//", i):
            touched.add(line)
            while i < n and code[i] != "\n":
                # backslash-newline continues a line comment
                if code[i] == "\\" and i + 1 < n and code[i + 1] == "\n":
                    i += 1
                    out.append("\n")
                    line += 1
                    touched.add(line)
                i += 1
            continue
        if ch == "/" and code.startswith("/*", i):
            end = code.find("*/", i + 2)
            if end < 0:
                raise MalformedSource("unterminated block comment", _byte_offset(code, i))
            # adjacent comments form one gap; judge it by the code around it
            before = out[-1][-1:] if out and out[-1] else " "
            j = end + 2
            while code.startswith("/*", j) and code.find("*/", j + 2) >= 0:
                j = code.find("*/", j + 2) + 2
            after = code[j] if j < n else " "
            touched.add(line)
            for _ in range(code.count("\n", i, end)):
                out.append("\n")
                line += 1
                touched.add(line)
            if not before.isspace() and not after.isspace() and "\n" not in code[i:j]:
                out.append(" ")
            i = end + 2
            continue
        if ch == "R" and code.startswith('R"', i) and (i == 0 or not (code[i - 1].isalnum() or code[i - 1] == "_") or code[i - 1] in "Lu8U"):
            m = re.compile(r'R"([^()\\\s]{0,16})\(').match(code, i)
            if m:
                closing = ")" + m.group(1) + '"'
                end = code.find(closing, m.end())
                if end < 0:
                    raise MalformedSource("unterminated raw string literal", _byte_offset(code, i))
                chunk = code[i : end + len(closing)]
                out.append(chunk)
                line += chunk.count("\n")
                i = end + len(closing)
                continue
        if ch == '"' or (ch == "'" and not _in_number(code, i)):
            start = i
            i += 1
            while True:
                if i >= n or code[i] == "\n":
                    kind = "string" if ch == '"' else "character"
                    raise MalformedSource(f"unterminated {kind} literal", _byte_offset(code, start))
                if code[i] == "\\":
                    if i + 1 < n and code[i + 1] == "\n":
                        line += 1
                    i += 2
                    continue
                if code[i] == ch:
                    i += 1
                    break
                i += 1
            out.append(code[start:i])
            continue
        if ch == "\n":
            line += 1
        out.append(ch)
        i += 1
    return out, touched


def _lex_fortran(code: str) -> tuple[list[str], set[int]]:
    out: list[str] = []
    touched: set[int] = set()
    line = 0
    i, n = 0, len(code)
    while i < n:
        ch = code[i]
        if ch == "!":
            touched.add(line)
            while i < n and code[i] != "\n":
                i += 1
            continue
        if ch in "'\"":
            start = i
            i += 1
            while True:
                if i >= n:
                    raise MalformedSource("unterminated string literal", _byte_offset(code, start))
                if code[i] == "\n":
                    # free-form continuation: the line must end with '&'
                    if code[start:i].rstrip().endswith("&"):
                        line += 1
                        i += 1
                        continue
                    raise MalformedSource("unterminated string literal", _byte_offset(code, start))
                if code[i] == ch:
                    if i + 1 < n and code[i + 1] == ch:  # doubled quote escape
                        i += 2
                        continue
                    i += 1
                    break
                i += 1
            out.append(code[start:i])
            continue
        if ch == "\n":
            line += 1
        out.append(ch)
        i += 1
    return out, touched


# ---------------------------------------------------------------------------
# token counting and dependency filtering


def _is_ident_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def count_tokens(code: str) -> int:
    """Identifier runs count as one token, other non-space characters as one each."""
    count = 0
    in_ident = False
    for ch in code:
        if _is_ident_char(ch):
            if not in_ident:
                count += 1
                in_ident = True
        else:
            in_ident = False
            if not ch.isspace():
                count += 1
    return count


def load_allowlist(source: SourceLanguage | str | Path) -> set[str]:
    """Read an allowlist file (one name per line, ``#`` comments allowed).

    A language selects the bundled default list; a path reads that file.
    """
    if isinstance(source, Path):
        text = source.read_text(encoding="utf-8")
    else:
        language = SourceLanguage(source)
        text = (ALLOWLIST_DIR / f"{language.value}.txt").read_text(encoding="utf-8")
    names = set()
    for raw in text.splitlines():
        name = raw.split("#", 1)[0].strip()
        if name:
            names.add(name)
    return names


_C_INCLUDE = re.compile(r'^\s*#\s*include\s*([<"])([^>"]+)[>"]', re.MULTILINE)
_F_USE = re.compile(
    r"^\s*use\b\s*(?:,\s*(?:non_)?intrinsic\s*)?(?:::)?\s*([a-z_][a-z0-9_]*)",
    re.IGNORECASE | re.MULTILINE,
)
_F_INCLUDE = re.compile(r"""^\s*include\s+['"]([^'"]+)['"]""", re.IGNORECASE | re.MULTILINE)
_F_MODULE = re.compile(r"^\s*module\s+(?!procedure\b)([a-z_][a-z0-9_]*)", re.IGNORECASE | re.MULTILINE)


def external_dependencies(code: str, language: SourceLanguage | str) -> list[str]:
    """List include/use/import targets referenced by ``code``, in order."""
    language = SourceLanguage(language)
    targets = [m.group(2).strip() for m in _C_INCLUDE.finditer(code)]
    if language is SourceLanguage.FORTRAN:
        local = {m.group(1).lower() for m in _F_MODULE.finditer(code)}
        targets = [t.lower() for t in targets]
        targets += [m.group(1).lower() for m in _F_USE.finditer(code) if m.group(1).lower() not in local]
        targets += [m.group(1) for m in _F_INCLUDE.finditer(code)]
    return targets


def is_dependency_heavy(
    code: str, language: SourceLanguage | str, allowlist: Iterable[str] | None = None
) -> bool:
    language = SourceLanguage(language)
    allowed = set(allowlist) if allowlist is not None else load_allowlist(language)
    if language is SourceLanguage.FORTRAN:
        allowed = {name.lower() for name in allowed}
    return any(target not in allowed for target in external_dependencies(code, language))


# ---------------------------------------------------------------------------
# LLM checks


def strip_comments_via_model(code: str, gateway: "Gateway") -> str:
    """Prompt-driven comment removal; the reply's fenced block, or the bare reply."""
    from dialogue_forge.gateway import BlockNotFound, DialogueMemory, extract_code_block

    memory = DialogueMemory(token_budget=gateway.token_budget)
    reply = gateway.complete(memory, gateway.render("strip_comments", {"CPP_Code": code}), stage_tag="Preprocess")
    try:
        return extract_code_block(reply, "cpp")
    except BlockNotFound:
        return reply.strip("\n")


def check_self_contained(code: str, language: SourceLanguage | str, gateway: "Gateway") -> bool:
    """Ask the model whether ``code`` is self-contained; one reprompt on a vague answer."""
    from dialogue_forge.gateway import DialogueMemory, Verdict, parse_verdict

    language = SourceLanguage(language)
    template = "self_contained" if language is not SourceLanguage.FORTRAN else "self_contained_fortran"
    memory = DialogueMemory(token_budget=gateway.token_budget)
    prompt = gateway.render(template, {"CPP_Code": code} if template == "self_contained" else {"Fortran_Code": code})
    verdict = parse_verdict(gateway.complete(memory, prompt, stage_tag="Preprocess"))
    if verdict is Verdict.UNPARSEABLE:
        reply = gateway.complete(memory, gateway.render("verdict_reprompt", {}), stage_tag="Preprocess")
        verdict = parse_verdict(reply)
    if verdict is Verdict.UNPARSEABLE:
        raise VerdictUnparseable(f"no YES/NO verdict after reprompt: {reply[:80]!r}")
    return verdict is Verdict.YES


# ---------------------------------------------------------------------------
# selection, loading, and the preprocessing driver


def select_units(corpus: Sequence[SourceUnit], start: int, stop: int) -> list[SourceUnit]:
    """Return units with ``start <= origin_index < stop`` in corpus order."""
    if start < 0 or stop < start:
        raise RangeError(f"invalid interval [{start}, {stop})")
    if corpus:
        upper = max(u.origin_index for u in corpus) + 1
        if stop > upper:
            raise RangeError(f"interval [{start}, {stop}) exceeds corpus bound {upper}")
    elif stop > 0:
        raise RangeError(f"interval [{start}, {stop}) exceeds empty corpus")
    return [u for u in corpus if start <= u.origin_index < stop]


@dataclass(frozen=True)
class RawSource:
    index: int
    language: SourceLanguage
    code: str
    path: str | None = None


def iter_corpus(path: Path | str, language: SourceLanguage | str | None = None) -> Iterator[RawSource]:
    """Yield raw sources from a JSONL file or a directory of source files.

    Directory entries are sorted by relative path and indexed from zero.
    """
    path = Path(path)
    wanted = SourceLanguage(language) if language is not None else None
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in _EXTENSIONS)
        for index, file in enumerate(files):
            lang = _EXTENSIONS[file.suffix.lower()]
            if wanted is SourceLanguage.CPP and lang is SourceLanguage.CUDA:
                continue
            if wanted is None or lang is wanted:
                yield RawSource(index, lang, file.read_text(encoding="utf-8", errors="replace"), str(file))
        return
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raw = RawSource(int(obj["index"]), SourceLanguage(obj["language"]), obj["code"])
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
            if wanted is None or raw.language is wanted:
                yield raw


@dataclass(frozen=True)
class FilterEvent:
    origin_index: int
    reason: str
    detail: str = ""

    def to_record(self) -> dict:
        return {"origin_index": self.origin_index, "reason": self.reason, "detail": self.detail}


def preprocess(
    raw: RawSource,
    config: PreprocessConfig,
    gateway: "Gateway | None" = None,
) -> SourceUnit | FilterEvent:
    """Run every filter over one raw source; return the unit or the reason it was dropped."""
    code = raw.code
    if config.strip_comments:
        try:
            code = strip_comments(code, raw.language)
        except MalformedSource as exc:
            return FilterEvent(raw.index, "malformed", str(exc))
        if config.comment_mode == "llm" and raw.language is not SourceLanguage.FORTRAN:
            if gateway is None:
                raise ValueError("comment_mode='llm' needs a gateway")
            code = strip_comments_via_model(raw.code, gateway)
    if not code.strip():
        return FilterEvent(raw.index, "empty")
    tokens = count_tokens(code)
    if tokens > config.max_tokens:
        return FilterEvent(raw.index, "too_long", f"{tokens} > {config.max_tokens}")
    allowlist = load_allowlist(raw.language) | config.dependency_allowlist
    if is_dependency_heavy(code, raw.language, allowlist):
        allowed = {a.lower() for a in allowlist} if raw.language is SourceLanguage.FORTRAN else allowlist
        missing = [t for t in external_dependencies(code, raw.language) if t not in allowed]
        return FilterEvent(raw.index, "dependency_heavy", ", ".join(missing))
    if config.require_self_contained:
        if gateway is None:
            raise ValueError("require_self_contained needs a gateway")
        try:
            if not check_self_contained(code, raw.language, gateway):
                return FilterEvent(raw.index, "not_self_contained")
        except VerdictUnparseable as exc:
            logger.warning("unit %d dropped: %s", raw.index, exc)
            return FilterEvent(raw.index, "verdict_unparseable", str(exc))
    return SourceUnit.create(raw.index, raw.language, code)
