from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

from dialogue_forge.corpus import count_tokens


class Role(str, enum.Enum):
    QUESTIONER = "questioner"
    SOLVER = "solver"


class ContextOverflow(RuntimeError):
    pass


@dataclass(frozen=True)
class ChatTurn:
    role: Role
    content: str
    stage_tag: str
    timestamp: float = field(default_factory=time.monotonic, compare=False)

    def __post_init__(self) -> None:
        if not self.content:
            raise ValueError("chat turn content must be non-empty")


@dataclass
class DialogueMemory:
    """Full turn history of one sample plus the send-time truncation policy.

    ``turns`` is never truncated; :meth:`window` decides what is sent to the
    backend when the history outgrows ``token_budget``.
    """

    token_budget: int = 32000
    turns: list[ChatTurn] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")

    def append_exchange(self, question: str, solution: str, stage_tag: str) -> None:
        if self.turns and self.turns[-1].role is not Role.SOLVER:
            raise RuntimeError("memory alternation broken")
        self.turns.append(ChatTurn(Role.QUESTIONER, question, stage_tag))
        self.turns.append(ChatTurn(Role.SOLVER, solution, stage_tag))

    def exchanges(self) -> list[tuple[str, str]]:
        return [(q.content, s.content) for q, s in zip(self.turns[::2], self.turns[1::2])]

    def stage_exchanges(self, stage_tag: str) -> int:
        return sum(1 for t in self.turns[::2] if t.stage_tag == stage_tag)

    def is_alternating(self) -> bool:
        return all(
            t.role is (Role.QUESTIONER if i % 2 == 0 else Role.SOLVER) for i, t in enumerate(self.turns)
        )

    def window(self, prompt: str) -> list[tuple[str, str]]:
        """Exchanges to send ahead of ``prompt`` within the token budget.

        Oldest exchanges go first, but the first exchange (which carries the
        original source code) is always kept.
        """
        exchanges = self.exchanges()
        cost = [count_tokens(q) + count_tokens(s) for q, s in exchanges]
        budget = self.token_budget - count_tokens(prompt)
        if budget < 0:
            raise ContextOverflow("prompt alone exceeds the token budget")
        keep = list(range(len(exchanges)))
        while keep and sum(cost[i] for i in keep) > budget:
            if len(keep) > 1:
                keep.pop(1)
            else:
                keep.pop()
        return [exchanges[i] for i in keep]

    def rendered_tokens(self, prompt: str) -> int:
        return sum(count_tokens(q) + count_tokens(s) for q, s in self.window(prompt)) + count_tokens(prompt)
