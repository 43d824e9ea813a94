from __future__ import annotations

import logging
import time
from typing import Callable, Mapping

from dialogue_forge.gateway.backends import (
    Backend,
    BackendConfig,
    BackendUnavailable,
    Message,
    TransportError,
)
from dialogue_forge.gateway.memory import DialogueMemory
from dialogue_forge.gateway.templates import TemplateCatalog

logger = logging.getLogger(__name__)


class Gateway:
    """Template rendering plus retrying completion calls against one backend."""

    def __init__(
        self,
        backend: Backend,
        config: BackendConfig | None = None,
        templates: TemplateCatalog | None = None,
        system_prompt: str | None = None,
        token_budget: int = 32000,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.config = config or BackendConfig()
        self.templates = templates or TemplateCatalog()
        self.system_prompt = system_prompt
        self.token_budget = token_budget
        self._sleep = sleep

    def render(self, template_id: str, bindings: Mapping[str, str]) -> str:
        return self.templates.render(template_id, bindings)

    def messages_for(self, memory: DialogueMemory, prompt: str) -> list[Message]:
        messages: list[Message] = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        for question, solution in memory.window(prompt):
            messages.append({"role": "user", "content": question})
            messages.append({"role": "assistant", "content": solution})
        messages.append({"role": "user", "content": prompt})
        return messages

    def complete(self, memory: DialogueMemory, prompt: str, stage_tag: str = "") -> str:
        """Send ``prompt`` with the memory window; append the exchange on success.

        Transport failures are retried up to ``max_retries`` times with
        exponential backoff.
        """
        messages = self.messages_for(memory, prompt)
        attempts = self.config.max_retries + 1
        for attempt in range(attempts):
            try:
                reply = self.backend.send(messages, self.config)
            except TransportError as exc:
                if attempt + 1 == attempts:
                    raise BackendUnavailable(f"backend failed after {attempts} attempts: {exc}") from exc
                delay = self.config.backoff_base * (2**attempt)
                logger.warning("transport failure (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                self._sleep(delay)
                continue
            if not reply:
                # empty replies would break the non-empty turn invariant
                reply = "(empty reply)"
            memory.append_exchange(prompt, reply, stage_tag)
            return reply
        raise AssertionError("unreachable")
