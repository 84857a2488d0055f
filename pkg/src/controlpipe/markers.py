"""Reasoning-control marker protocol.

Prompts select the model's reasoning behavior through literal marker
sequences appended to the instruction ("/think" alone for unbounded
reasoning, "/think /short|/medium|/long" for a word-budgeted variant).
Model outputs are expected to wrap their reasoning in <think>...</think>
delimiters followed by the final answer; this module builds the prompts
and parses/validates outputs against that grammar.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .errors import ControlPipeError

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
BASE_MARKER = "/think"

Tokenizer = Callable[[str], list]


class MarkerError(ControlPipeError):
    """Malformed think-delimiter structure in a model output."""


class UnterminatedThink(MarkerError):
    """Output opens a think block but never closes it."""


class StrayDelimiter(MarkerError):
    """Output contains a close delimiter with no preceding open delimiter."""


class ReasoningMode(Enum):
    """The five response styles a prompt can request."""

    DIRECT = "direct"
    MAX = "max"
    LONG = "long"
    MEDIUM = "medium"
    SHORT = "short"

    @classmethod
    def from_wire(cls, value: str) -> "ReasoningMode":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(f"unknown reasoning mode {value!r}") from None

    @property
    def wire(self) -> str:
        return self.value

    def marker(self) -> Optional[str]:
        """Marker suffix for prompts, or None for direct mode."""
        if self is ReasoningMode.DIRECT:
            return None
        if self is ReasoningMode.MAX:
            return BASE_MARKER
        return f"{BASE_MARKER} {_LENGTH_MARKERS[self]}"

    def word_budget(self) -> Optional[int]:
        """Target word limit for condensed reasoning; None for direct/max."""
        return _WORD_BUDGETS.get(self)

    def requires_reasoning(self) -> bool:
        return self is not ReasoningMode.DIRECT


_LENGTH_MARKERS = {
    ReasoningMode.LONG: "/long",
    ReasoningMode.MEDIUM: "/medium",
    ReasoningMode.SHORT: "/short",
}

_WORD_BUDGETS = {
    ReasoningMode.LONG: 700,
    ReasoningMode.MEDIUM: 150,
    ReasoningMode.SHORT: 50,
}


@dataclass(frozen=True)
class ParsedResponse:
    """A model output split into its reasoning segment (if any) and answer."""

    answer: str
    reasoning: Optional[str] = None
    raw: str = ""


def build_prompt(instruction: str, mode: ReasoningMode) -> str:
    """Append the mode's marker sequence to the instruction.

    Direct mode returns the instruction unchanged; other modes append the
    marker(s) separated by single spaces.
    """
    if not instruction:
        raise ValueError("instruction must be non-empty")
    marker = mode.marker()
    if marker is None:
        return instruction
    return f"{instruction} {marker}"


def parse_response(raw: str) -> ParsedResponse:
    """Split a raw output into (reasoning, answer) per the delimiter grammar.

    A leading <think> block (after optional whitespace) is extracted up to the
    first close delimiter; everything after it, with leading whitespace
    trimmed, is the answer. Outputs without a leading open delimiter are pure
    answers; any delimiter text later in such an output is treated as literal
    content unless a close delimiter appears with no open before it.
    """
    if not raw:
        raise ValueError("raw output must be non-empty")
    stripped = raw.lstrip()
    if stripped.startswith(THINK_OPEN):
        body = stripped[len(THINK_OPEN):]
        if THINK_CLOSE not in body:
            raise UnterminatedThink(f"no {THINK_CLOSE} after {THINK_OPEN}")
        reasoning, _, tail = body.partition(THINK_CLOSE)
        return ParsedResponse(answer=tail.lstrip(), reasoning=reasoning, raw=raw)
    open_at = raw.find(THINK_OPEN)
    close_at = raw.find(THINK_CLOSE)
    if close_at != -1 and (open_at == -1 or close_at < open_at):
        raise StrayDelimiter(f"{THINK_CLOSE} with no preceding {THINK_OPEN}")
    return ParsedResponse(answer=raw, reasoning=None, raw=raw)


def compose(reasoning: Optional[str], answer: str) -> str:
    """Inverse of parse_response for canonical outputs."""
    if reasoning is None:
        return answer
    return f"{THINK_OPEN}{reasoning}{THINK_CLOSE} {answer}"


def validate(parsed: ParsedResponse, mode: ReasoningMode) -> bool:
    """True iff the output's think-block presence matches the prompt's mode.

    Modes carrying the /think marker demand a non-empty reasoning segment;
    direct mode demands its absence. Whitespace-only reasoning counts as
    empty.
    """
    if mode is ReasoningMode.DIRECT:
        return parsed.reasoning is None
    return parsed.reasoning is not None and parsed.reasoning.strip() != ""


def whitespace_tokenizer(text: str) -> list:
    """Default tokenizer: split on runs of Unicode whitespace."""
    return text.split()


def count_reasoning_tokens(
    parsed: ParsedResponse, tokenizer: Tokenizer = whitespace_tokenizer
) -> int:
    """Token count of the reasoning segment; 0 when reasoning is absent."""
    if parsed.reasoning is None:
        return 0
    return len(tokenizer(parsed.reasoning))
