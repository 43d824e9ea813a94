"""Completion backends: live HTTP, digest-keyed replay, and scripted (tests)."""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import httpx

API_KEY_ENV = "DIALOGUE_FORGE_API_KEY"

Message = dict[str, str]


class TransportError(RuntimeError):
    """A retryable failure talking to the backend."""


class BackendUnavailable(RuntimeError):
    pass


class ReplayMiss(KeyError):
    def __init__(self, digest: str) -> None:
        super().__init__(f"replay fixture has no reply for prompt digest {digest}")
        self.digest = digest


@dataclass
class BackendConfig:
    kind: str = "replay"
    model_name: str = "replay"
    endpoint: str | None = None
    temperature: float = 0.2
    max_retries: int = 3
    request_timeout: float = 120.0
    replay_path: str | None = None
    max_concurrent: int = 4
    backoff_base: float = 0.5

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("live", "replay"):
            problems.append(f"backend kind must be 'live' or 'replay', got {self.kind!r}")
        if not 0.0 <= self.temperature <= 1.0:
            problems.append(f"temperature {self.temperature} outside [0, 1]")
        if self.max_retries < 0:
            problems.append("max_retries must be >= 0")
        if self.request_timeout <= 0:
            problems.append("request_timeout must be positive")
        if self.kind == "live":
            if not self.endpoint:
                problems.append("live backend needs an endpoint")
            if not os.environ.get(API_KEY_ENV):
                problems.append(f"live backend needs the {API_KEY_ENV} environment variable")
        if self.kind == "replay" and not self.replay_path:
            problems.append("replay backend needs a fixture path")
        return problems

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 1]")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


def normalize_prompt(prompt: str) -> str:
    return re.sub(r"\s+", " ", prompt).strip()


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(normalize_prompt(prompt).encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, messages: Sequence[Message], config: BackendConfig) -> str: ...


class ReplayBackend:
    """Replies looked up by the digest of the last user message.

    Fixture format is JSONL with ``{"digest": ..., "reply": ...}`` per line.
    """

    def __init__(self, entries: dict[str, str]) -> None:
        self.entries = dict(entries)

    @classmethod
    def from_file(cls, path: Path | str) -> "ReplayBackend":
        entries: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    entries[obj["digest"]] = obj["reply"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad replay record ({exc})") from exc
        return cls(entries)

    def send(self, messages: Sequence[Message], config: BackendConfig) -> str:
        digest = prompt_digest(messages[-1]["content"])
        try:
            return self.entries[digest]
        except KeyError:
            raise ReplayMiss(digest) from None


class ScriptedBackend:
    """Serves replies from a queue or a ``prompt -> reply`` callable.

    Entries may be exceptions, which are raised instead of returned; useful
    for exercising the retry path.  Every served exchange is recorded so the
    run can be frozen into a replay fixture with :meth:`dump_fixture`.
    """

    def __init__(self, script: Iterable[str | Exception] | Callable[[str], str]) -> None:
        self._responder = script if callable(script) else None
        self._queue = [] if callable(script) else list(script)
        self.prompts: list[str] = []
        self.recorded: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def send(self, messages: Sequence[Message], config: BackendConfig) -> str:
        prompt = messages[-1]["content"]
        with self._lock:
            self.prompts.append(prompt)
            if self._responder is not None:
                reply = self._responder(prompt)
            else:
                if not self._queue:
                    raise ReplayMiss(prompt_digest(prompt))
                reply = self._queue.pop(0)
            if isinstance(reply, Exception):
                raise reply
            self.recorded.append((prompt_digest(prompt), reply))
            return reply

    def dump_fixture(self, path: Path | str) -> None:
        write_fixture(self.recorded, path)


def write_fixture(entries: Iterable[tuple[str, str]], path: Path | str) -> None:
    seen: dict[str, str] = {}
    for digest, reply in entries:
        if seen.get(digest, reply) != reply:
            raise ValueError(f"conflicting replies recorded for digest {digest}")
        seen[digest] = reply
    with open(path, "w", encoding="utf-8") as fh:
        for digest, reply in seen.items():
            fh.write(json.dumps({"digest": digest, "reply": reply}) + "\n")


class HttpBackend:
    """OpenAI-style ``/chat/completions`` client."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None) -> None:
        self._client = client or httpx.Client(timeout=config.request_timeout)
        self._slots = threading.BoundedSemaphore(max(1, config.max_concurrent))

    def send(self, messages: Sequence[Message], config: BackendConfig) -> str:
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise BackendUnavailable(f"{API_KEY_ENV} is not set")
        url = config.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        payload = {"model": config.model_name, "temperature": config.temperature, "messages": list(messages)}
        with self._slots:
            try:
                resp = self._client.post(url, json=payload, headers={"Authorization": f"Bearer {key}"})
            except httpx.HTTPError as exc:
                raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc


class RecordingBackend:
    """Wraps another backend and records every exchange for a replay fixture."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.recorded: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def send(self, messages: Sequence[Message], config: BackendConfig) -> str:
        reply = self.inner.send(messages, config)
        with self._lock:
            self.recorded.append((prompt_digest(messages[-1]["content"]), reply))
        return reply


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "replay":
        if not config.replay_path:
            raise ValueError("replay backend needs a fixture path")
        return ReplayBackend.from_file(config.replay_path)
    if config.kind == "live":
        return HttpBackend(config)
    raise ValueError(f"unknown backend kind {config.kind!r}")
