"""Prompt templates stored one per file and keyed by template id.

Placeholders use ``str.format`` syntax (``{CPP_Code}``); doubled braces are
literal braces.  Bound values are inserted verbatim.
"""

from __future__ import annotations

import string
from pathlib import Path
from typing import Mapping

BUNDLED_DIR = Path(__file__).with_name("templates")


class TemplateNotFound(KeyError):
    pass


class MissingBinding(KeyError):
    def __init__(self, template_id: str, placeholder: str) -> None:
        super().__init__(f"template {template_id!r} needs a binding for {placeholder!r}")
        self.template_id = template_id
        self.placeholder = placeholder


def placeholders(text: str) -> list[str]:
    """Placeholder names in order of first appearance."""
    seen: list[str] = []
    for _, name, _, _ in string.Formatter().parse(text):
        if name is not None and name not in seen:
            seen.append(name)
    return seen


class TemplateCatalog:
    """Templates loaded from a directory; defaults to the bundled catalog."""

    def __init__(self, directory: Path | str | None = None) -> None:
        self.directory = Path(directory) if directory is not None else None

    def _path(self, template_id: str) -> Path:
        if self.directory is not None:
            return self.directory / f"{template_id}.txt"
        return BUNDLED_DIR / f"{template_id}.txt"

    def ids(self) -> list[str]:
        root = self.directory or BUNDLED_DIR
        return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))

    def source(self, template_id: str) -> str:
        if not template_id or "/" in template_id or template_id.startswith("."):
            raise TemplateNotFound(template_id)
        path = self._path(template_id)
        if not path.is_file():
            raise TemplateNotFound(template_id)
        return path.read_text(encoding="utf-8")

    def render(self, template_id: str, bindings: Mapping[str, str]) -> str:
        text = self.source(template_id)
        for name in placeholders(text):
            if name not in bindings:
                raise MissingBinding(template_id, name)
        return text.format_map({k: str(v) for k, v in bindings.items()})


_default = TemplateCatalog()


def render(template_id: str, bindings: Mapping[str, str]) -> str:
    return _default.render(template_id, bindings)
