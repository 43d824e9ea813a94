"""Parsing of structured solver replies: fenced code, repair tags, verdicts."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)

_FENCE_OPEN = re.compile(r"^[ \t]*(```|''')[ \t]*([A-Za-z0-9_+#.-]*)[ \t]*$")
_FENCE_CLOSE = re.compile(r"^[ \t]*(```|''')[ \t]*$")

# common aliases models use for the same language
_TAG_ALIASES = {
    "c++": "cpp",
    "cxx": "cpp",
    "cc": "cpp",
    "cu": "cuda",
    "f90": "fortran",
    "f": "fortran",
}


class BlockNotFound(LookupError):
    pass


class Verdict(str, enum.Enum):
    YES = "yes"
    NO = "no"
    UNPARSEABLE = "unparseable"


@dataclass
class ParsedReply:
    raw: str
    code_blocks: list[tuple[str, str]] = field(default_factory=list)
    repair_tags: list[str] = field(default_factory=list)
    verdict: Verdict | None = None


def _normalize_tag(tag: str) -> str:
    tag = tag.lower()
    return _TAG_ALIASES.get(tag, tag)


def _trim_blank_lines(lines: list[str]) -> str:
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    return "\n".join(lines)


def iter_code_blocks(text: str) -> list[tuple[str, str]]:
    """All closed fenced blocks as ``(tag, contents)`` pairs, in order."""
    blocks = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        m = _FENCE_OPEN.match(lines[i])
        if m is None:
            i += 1
            continue
        delim = m.group(1)
        body: list[str] = []
        j = i + 1
        while j < len(lines):
            close = _FENCE_CLOSE.match(lines[j])
            if close is not None and close.group(1) == delim:
                break
            body.append(lines[j])
            j += 1
        if j == len(lines):
            break  # unclosed fence
        blocks.append((_normalize_tag(m.group(2)), _trim_blank_lines(body)))
        i = j + 1
    return blocks


def extract_code_block(text: str, language_tag: str) -> str:
    wanted = _normalize_tag(language_tag)
    for tag, body in iter_code_blocks(text):
        if tag == wanted:
            return body
    raise BlockNotFound(f"no ```{language_tag} fenced block in reply")


def extract_repair_tags(text: str) -> list[str]:
    """Parse the first non-blank line as a JSON array of strings; [] otherwise."""
    for line in text.splitlines():
        if not line.strip():
            continue
        candidate = line.strip()
        if not candidate.startswith("["):
            return []
        try:
            tags = json.loads(candidate)
        except json.JSONDecodeError:
            logger.info("malformed repair tag line: %.80s", candidate)
            return []
        if isinstance(tags, list) and all(isinstance(t, str) for t in tags):
            return tags
        logger.info("repair tag line is not a list of strings: %.80s", candidate)
        return []
    return []


_WORD = re.compile(r"[A-Za-z]+")


def parse_verdict(text: str) -> Verdict:
    # skips leading markdown/punctuation such as "**Yes**" or "> No."
    m = _WORD.search(text)
    if m is None:
        return Verdict.UNPARSEABLE
    word = m.group(0).lower()
    if word == "yes":
        return Verdict.YES
    if word == "no":
        return Verdict.NO
    return Verdict.UNPARSEABLE


def parse_reply(text: str) -> ParsedReply:
    verdict = parse_verdict(text)
    return ParsedReply(
        raw=text,
        code_blocks=iter_code_blocks(text),
        repair_tags=extract_repair_tags(text),
        verdict=None if verdict is Verdict.UNPARSEABLE else verdict,
    )


def wrap_code_block(code: str, language_tag: str) -> str:
    return f"```{language_tag}\n{code}\n```"
