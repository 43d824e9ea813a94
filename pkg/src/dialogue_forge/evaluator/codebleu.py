"""CodeBLEU-style similarity: n-gram, keyword-weighted n-gram, syntax, dataflow.

No grammar dependency: the syntax component is built by a bracket/keyword
chunker (:func:`build_tree`) and the dataflow component by a lexical
def-use scan over function-sized windows.  Both are approximations that
respond monotonically to structural similarity; swap in a real parser by
passing a different ``tree_builder`` to :func:`codebleu`.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

from dialogue_forge.corpus import MalformedSource, SourceLanguage, strip_comments

KEYWORD_DIR = Path(__file__).with_name("keywords")
MAX_ORDER = 4
KEYWORD_WEIGHT = 1.0
OTHER_WEIGHT = 0.2  # keywords count 5x


class ScoreUndefined(ValueError):
    pass


@dataclass(frozen=True)
class CodeBleuScore:
    ngram: float
    weighted_ngram: float
    ast_match: float
    dataflow_match: float
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    combined: float = field(default=-1.0)

    def __post_init__(self) -> None:
        if len(self.weights) != 4 or any(w < 0 for w in self.weights):
            raise ValueError("weights must be four non-negative numbers")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {sum(self.weights)}, not 1")
        for name in ("ngram", "weighted_ngram", "ast_match", "dataflow_match"):
            if not 0.0 <= getattr(self, name) <= 1.0 + 1e-12:
                raise ValueError(f"{name} outside [0, 1]")
        total = sum(w * c for w, c in zip(self.weights, self.components))
        object.__setattr__(self, "combined", total)

    @property
    def components(self) -> tuple[float, float, float, float]:
        return (self.ngram, self.weighted_ngram, self.ast_match, self.dataflow_match)

    def to_dict(self) -> dict:
        return {
            "ngram": self.ngram,
            "weighted_ngram": self.weighted_ngram,
            "ast_match": self.ast_match,
            "dataflow_match": self.dataflow_match,
            "weights": list(self.weights),
            "combined": self.combined,
        }


# ---------------------------------------------------------------------------
# tokens

_TOKEN = re.compile(
    r"""
    "(?:\\.|[^"\\\n])*"                       # double-quoted string
  | '(?:\\.|''|[^'\\\n])*'                    # single-quoted string / char
  | \.[A-Za-z]+\.                             # Fortran dotted operators (.and.)
  | (?:\d+\.?\d*|\.\d+)(?:[eEdD][+-]?\d+)?(?:_\w+|[A-Za-z]+)?   # numbers with suffix/kind
  | [A-Za-z_]\w*                              # identifiers and keywords
  | <<=|>>=|->|\+\+|--|<<|>>|<=|>=|==|!=|/=|&&|\|\||\+=|-=|\*=|%=|&=|\|=|\^=|::|\*\*|=>
  | \S
    """,
    re.VERBOSE,
)


@lru_cache(maxsize=None)
def load_keywords(language: SourceLanguage | str) -> frozenset[str]:
    language = SourceLanguage(language)
    text = (KEYWORD_DIR / f"{language.value}.txt").read_text(encoding="utf-8")
    return frozenset(line.split("#", 1)[0].strip() for line in text.splitlines() if line.split("#", 1)[0].strip())


def tokenize(code: str, language: SourceLanguage | str) -> list[str]:
    """Comment-free token list.  Fortran is case-folded and keeps newlines as ``\\n`` tokens."""
    language = SourceLanguage(language)
    try:
        code = strip_comments(code, language)
    except MalformedSource:
        pass
    if language is not SourceLanguage.FORTRAN:
        return _TOKEN.findall(code)
    tokens: list[str] = []
    # '&' at end of line continues the statement
    code = re.sub(r"&[ \t]*\n[ \t]*&?", " ", code)
    for line in code.split("\n"):
        line_tokens = [t.lower() if not t[0] in "'\"" else t for t in _TOKEN.findall(line)]
        if line_tokens:
            tokens.extend(line_tokens)
            tokens.append("\n")
    return tokens


def _category(tok: str, keywords: frozenset[str]) -> str:
    if tok in keywords:
        return tok
    if tok[0] in "'\"":
        return "str"
    if tok[0].isdigit() or (tok[0] == "." and len(tok) > 1 and tok[1].isdigit()):
        return "num"
    if tok[0].isalpha() or tok[0] == "_":
        return "id"
    return tok


# ---------------------------------------------------------------------------
# n-gram components


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu(cand: list[str], ref: list[str], unigram_weight: Callable[[str], float] | None) -> float:
    if not cand or not ref:
        return 0.0
    log_sum = 0.0
    for n in range(1, MAX_ORDER + 1):
        c_counts, r_counts = _ngrams(cand, n), _ngrams(ref, n)
        if n == 1 and unigram_weight is not None:
            matched = sum(unigram_weight(g[0]) * min(c, r_counts[g]) for g, c in c_counts.items())
            total = sum(unigram_weight(g[0]) * c for g, c in c_counts.items())
        else:
            matched = sum(min(c, r_counts[g]) for g, c in c_counts.items())
            total = sum(c_counts.values())
        if n == 1:
            if matched == 0:
                return 0.0
            precision = matched / total
        else:
            precision = (matched + 1) / (total + 1)  # add-one smoothing for n > 1
        log_sum += math.log(precision)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return min(1.0, bp * math.exp(log_sum / MAX_ORDER))


def ngram_match(cand: list[str], ref: list[str]) -> float:
    """Smoothed 4-gram BLEU with brevity penalty."""
    return _bleu(cand, ref, None)


def weighted_ngram_match(cand: list[str], ref: list[str], keywords: frozenset[str]) -> float:
    """As :func:`ngram_match` but keyword unigrams weigh 5x the rest."""
    return _bleu(cand, ref, lambda t: KEYWORD_WEIGHT if t in keywords else OTHER_WEIGHT)


# ---------------------------------------------------------------------------
# approximate syntax tree


@dataclass
class Node:
    label: str
    children: list = field(default_factory=list)

    def signature(self, keywords: frozenset[str]) -> str:
        parts = [c.signature(keywords) if isinstance(c, Node) else _category(c, keywords) for c in self.children]
        return f"{self.label}({' '.join(parts)})"

    def walk(self):
        yield self
        for c in self.children:
            if isinstance(c, Node):
                yield from c.walk()


_OPEN = {"(": ("paren", ")"), "[": ("bracket", "]"), "{": ("block", "}")}


def _group(tokens: list[str]) -> list:
    """Nest bracketed runs into paren/bracket/block nodes; unbalanced closers stay leaves."""
    root: list = []
    stack: list[tuple[list, str, Node]] = []
    current = root
    for tok in tokens:
        if tok in _OPEN:
            label, closer = _OPEN[tok]
            node = Node(label)
            current.append(node)
            stack.append((current, closer, node))
            current = node.children
        elif stack and tok == stack[-1][1]:
            current = stack.pop()[0]
        else:
            current.append(tok)
    return root


def _c_statements(items: list) -> list[Node]:
    stmts: list[Node] = []
    buf: list = []
    for item in items:
        if isinstance(item, Node) and item.label == "block":
            item.children = _c_statements(item.children)
            buf.append(item)
            stmts.append(Node("stmt", buf))
            buf = []
            continue
        if isinstance(item, Node):
            _nest_blocks(item)
        buf.append(item)
        if item == ";":
            stmts.append(Node("stmt", buf))
            buf = []
    if buf:
        stmts.append(Node("stmt", buf))
    return stmts


def _nest_blocks(node: Node) -> None:
    for child in node.children:
        if isinstance(child, Node):
            if child.label == "block":
                child.children = _c_statements(child.children)
            else:
                _nest_blocks(child)


_F_END = re.compile(r"^end(?:do|if|select|function|subroutine|program|module|type|interface|where|block)?$")
_F_OPENERS = ("program", "module", "subroutine", "function", "do", "select", "interface", "where", "block")


def _fortran_opens(line: list[str]) -> bool:
    if not line or line[0] == "call" or _F_END.match(line[0]):
        return False
    head = line[0]
    if head == "if" and line[-1] == "then":
        return True
    if head == "type" and len(line) > 1 and line[1] != "(":
        return True
    if head == "where" and line[-1] == ")":
        return True
    if head == "module" and len(line) > 1 and line[1] == "procedure":
        return False
    if head in _F_OPENERS and head != "where":
        return True
    # typed / prefixed procedures: "integer function f(x)", "recursive subroutine s"
    before_paren = line[: line.index("(")] if "(" in line else line
    return "function" in before_paren or "subroutine" in before_paren


def _fortran_tree(tokens: list[str]) -> Node:
    lines: list[list[str]] = []
    buf: list[str] = []
    for tok in tokens:
        if tok in ("\n", ";"):
            if buf:
                lines.append(buf)
            buf = []
        else:
            buf.append(tok)
    if buf:
        lines.append(buf)
    root = Node("root")
    stack = [root]
    for line in lines:
        stmt = Node("stmt", _group(line))
        if _F_END.match(line[0]):
            stack[-1].children.append(stmt)
            if len(stack) > 1:
                stack.pop()
        elif _fortran_opens(line):
            block = Node("block", [stmt])
            stack[-1].children.append(block)
            stack.append(block)
        else:
            stack[-1].children.append(stmt)
    return root


def build_tree(tokens: list[str], language: SourceLanguage | str) -> Node:
    if SourceLanguage(language) is SourceLanguage.FORTRAN:
        return _fortran_tree(tokens)
    return Node("root", _c_statements(_group(tokens)))


def ast_match(cand_tree: Node, ref_tree: Node, keywords: frozenset[str]) -> float:
    """Fraction of candidate subtree signatures (multiset) also present in the reference."""
    cand = Counter(n.signature(keywords) for n in cand_tree.walk())
    ref = Counter(n.signature(keywords) for n in ref_tree.walk())
    total = sum(cand.values())
    if total == 0:
        return 1.0 if not ref else 0.0
    return sum(min(c, ref[s]) for s, c in cand.items()) / total


# ---------------------------------------------------------------------------
# dataflow

ASSIGN_OPS = frozenset({"=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "<<=", ">>="})
_INCDEC = frozenset({"++", "--"})
_CLOSERS = {")": "(", "]": "["}


def _is_ident(tok: str) -> bool:
    return bool(tok) and (tok[0].isalpha() or tok[0] == "_")


def scope_windows(tokens: list[str], language: SourceLanguage | str) -> list[list[list[str]]]:
    """Split tokens into windows (roughly one per function), each a list of statements."""
    if SourceLanguage(language) is SourceLanguage.FORTRAN:
        windows: list[list[list[str]]] = [[]]
        stmt: list[str] = []
        for tok in tokens + ["\n"]:
            if tok in ("\n", ";"):
                if stmt:
                    starts_unit = stmt[0] in ("program", "module") or (
                        stmt[0] not in ("end", "call")
                        and any(t in ("function", "subroutine") for t in (stmt[: stmt.index("(")] if "(" in stmt else stmt))
                    )
                    if starts_unit and windows[-1]:
                        windows.append([])
                    windows[-1].append(stmt)
                stmt = []
            else:
                stmt.append(tok)
        return [w for w in windows if w]
    windows = []
    current: list[list[str]] = []
    stmt = []
    depth = 0
    for tok in tokens:
        if tok in (";", "{", "}"):
            if stmt:
                current.append(stmt)
            stmt = []
            if tok == "{":
                depth += 1
            elif tok == "}":
                depth = max(0, depth - 1)
                if depth == 0:
                    windows.append(current)
                    current = []
            elif depth == 0:
                windows.append(current)
                current = []
        else:
            stmt.append(tok)
    if stmt:
        current.append(stmt)
    if current:
        windows.append(current)
    return [w for w in windows if w]


def _variables(stmt: list[str], keywords: frozenset[str], fortran: bool) -> list[int]:
    """Token positions in ``stmt`` that name variables."""
    out = []
    for i, tok in enumerate(stmt):
        if not _is_ident(tok) or tok in keywords:
            continue
        prev = stmt[i - 1] if i else ""
        nxt = stmt[i + 1] if i + 1 < len(stmt) else ""
        if prev in (".", "->", "::") or nxt == "::":
            continue
        if nxt == "(" and (not fortran or prev == "call"):
            continue
        if fortran and prev == "call":
            continue
        out.append(i)
    return out


def _def_position(stmt: list[str], op_index: int, var_positions: list[int]) -> int | None:
    j = op_index - 1
    while j >= 0 and stmt[j] in _CLOSERS:
        opener, closer, depth = _CLOSERS[stmt[j]], stmt[j], 0
        while j >= 0:
            if stmt[j] == closer:
                depth += 1
            elif stmt[j] == opener:
                depth -= 1
                if depth == 0:
                    break
            j -= 1
        j -= 1
    candidates = [p for p in var_positions if p <= j]
    return candidates[-1] if candidates else None


def statement_effects(stmt: list[str], keywords: frozenset[str], fortran: bool = False) -> tuple[list[str], str | None]:
    """``(uses, defined)`` for one statement; uses are in token order."""
    positions = _variables(stmt, keywords, fortran)
    op_index = next((i for i, t in enumerate(stmt) if t in ASSIGN_OPS), None)
    def_pos = None
    compound = False
    if op_index is not None:
        def_pos = _def_position(stmt, op_index, positions)
        compound = stmt[op_index] != "="
    else:
        for i, tok in enumerate(stmt):
            if tok in _INCDEC:
                near = [p for p in positions if p in (i - 1, i + 1)]
                if near:
                    def_pos = near[0]
                    compound = True
                    break
    uses = [stmt[p] for p in positions if p != def_pos or compound]
    defined = stmt[def_pos] if def_pos is not None else None
    return uses, defined


def dataflow_pairs(tokens: list[str], language: SourceLanguage | str) -> Counter:
    """Multiset of ``(used variable, receiving variable)`` edges with normalized names.

    A use counts only when an earlier statement in the same window defined
    the variable.  Names are renamed ``v0, v1, ...`` by first appearance per
    window, so consistent renaming leaves the multiset unchanged.
    """
    language = SourceLanguage(language)
    keywords = load_keywords(language)
    fortran = language is SourceLanguage.FORTRAN
    pairs: Counter = Counter()
    for window in scope_windows(tokens, language):
        names: dict[str, str] = {}

        def norm(name: str) -> str:
            return names.setdefault(name, f"v{len(names)}")

        defined: set[str] = set()
        for stmt in window:
            for p in _variables(stmt, keywords, fortran):
                norm(stmt[p])
            uses, target = statement_effects(stmt, keywords, fortran)
            sink = norm(target) if target is not None else "<expr>"
            for name in uses:
                if name in defined:
                    pairs[(norm(name), sink)] += 1
            if target is not None:
                defined.add(target)
    return pairs


def dataflow_match(cand: Counter, ref: Counter, fallback: float = 0.0) -> float:
    """Fraction of candidate def-use pairs found in the reference.

    With no flows on either side the component is undefined and ``fallback``
    (the structural score, in ``codebleu``) stands in for it.
    """
    total = sum(cand.values())
    if total == 0:
        return fallback if not ref else 0.0
    return sum(min(c, ref[k]) for k, c in cand.items()) / total


# ---------------------------------------------------------------------------


def codebleu(
    candidate: str,
    reference: str,
    language: SourceLanguage | str,
    weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25),
    tree_builder: Callable[[list[str], SourceLanguage], Node] = build_tree,
) -> CodeBleuScore:
    language = SourceLanguage(language)
    cand = tokenize(candidate, language)
    ref = tokenize(reference, language)
    cand_plain = [t for t in cand if t != "\n"]
    ref_plain = [t for t in ref if t != "\n"]
    if not cand_plain or not ref_plain:
        raise ScoreUndefined("candidate or reference has no tokens")
    keywords = load_keywords(language)
    structural = ast_match(tree_builder(cand, language), tree_builder(ref, language), keywords)
    return CodeBleuScore(
        ngram=ngram_match(cand_plain, ref_plain),
        weighted_ngram=weighted_ngram_match(cand_plain, ref_plain, keywords),
        ast_match=structural,
        dataflow_match=dataflow_match(
            dataflow_pairs(cand, language), dataflow_pairs(ref, language), fallback=structural
        ),
        weights=tuple(weights),
    )
