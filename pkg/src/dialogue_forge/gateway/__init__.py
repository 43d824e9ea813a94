"""Prompt rendering, dialogue memory, completion backends and reply parsing."""

from dialogue_forge.gateway.backends import (
    API_KEY_ENV,
    Backend,
    BackendConfig,
    BackendUnavailable,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayMiss,
    ScriptedBackend,
    TransportError,
    make_backend,
    normalize_prompt,
    prompt_digest,
    write_fixture,
)
from dialogue_forge.gateway.client import Gateway
from dialogue_forge.gateway.memory import ChatTurn, ContextOverflow, DialogueMemory, Role
from dialogue_forge.gateway.replies import (
    BlockNotFound,
    ParsedReply,
    Verdict,
    extract_code_block,
    extract_repair_tags,
    iter_code_blocks,
    parse_reply,
    parse_verdict,
    wrap_code_block,
)
from dialogue_forge.gateway.templates import MissingBinding, TemplateCatalog, TemplateNotFound, render

__all__ = [
    "API_KEY_ENV",
    "Backend",
    "BackendConfig",
    "BackendUnavailable",
    "BlockNotFound",
    "ChatTurn",
    "ContextOverflow",
    "DialogueMemory",
    "Gateway",
    "HttpBackend",
    "MissingBinding",
    "ParsedReply",
    "RecordingBackend",
    "ReplayBackend",
    "ReplayMiss",
    "Role",
    "ScriptedBackend",
    "TemplateCatalog",
    "TemplateNotFound",
    "TransportError",
    "Verdict",
    "extract_code_block",
    "extract_repair_tags",
    "iter_code_blocks",
    "make_backend",
    "normalize_prompt",
    "parse_reply",
    "parse_verdict",
    "prompt_digest",
    "render",
    "wrap_code_block",
    "write_fixture",
]
