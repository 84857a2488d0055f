"""Rule-based corpus post-processing: emoji removal, length bounds,
n-gram repetition screening, and exact-after-canonicalization dedup.

Rules run in a fixed order (mutations before drop decisions) so that length
and repetition judgments see the cleaned text:

  strip emoji -> length bounds -> repetition threshold -> dedup (first wins)

The whole pass is a closure operator: running it twice equals running it
once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .records import Corpus, InstructionRecord, ReasoningSample

# Emoji code-point table: Emoticons, Transport and Map Symbols, Miscellaneous
# Symbols and Pictographs, Supplemental Symbols and Pictographs, Dingbats,
# plus variation selector-16 and the zero-width joiner used in sequences.
EMOJI_RANGES: Tuple[Tuple[int, int], ...] = (
    (0x1F600, 0x1F64F),
    (0x1F680, 0x1F6FF),
    (0x1F300, 0x1F5FF),
    (0x1F900, 0x1F9FF),
    (0x2700, 0x27BF),
    (0xFE0F, 0xFE0F),
    (0x200D, 0x200D),
)

_EMOJI_CLASS = "[" + "".join(
    re.escape(chr(lo)) if lo == hi else re.escape(chr(lo)) + "-" + re.escape(chr(hi))
    for lo, hi in EMOJI_RANGES
) + "]"
# A run of emoji, possibly interleaved with whitespace, plus surrounding
# whitespace. Matching whole runs lets the replacement collapse the
# whitespace the removal leaves behind without touching any other text.
_EMOJI_RUN = re.compile(r"\s*" + _EMOJI_CLASS + "(?:" + _EMOJI_CLASS + r"|\s)*")


@dataclass(frozen=True)
class FilterConfig:
    """Thresholds for the rule pipeline."""

    ngram_n: int = 3
    repetition_threshold: float = 0.5
    min_len: int = 1
    max_len: int = 100_000
    dedup_fields: Optional[Tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if self.ngram_n < 1:
            raise ValueError("ngram_n must be >= 1")
        if not 0.0 <= self.repetition_threshold <= 1.0:
            raise ValueError("repetition_threshold must lie in [0, 1]")
        if self.min_len < 0 or self.max_len < self.min_len:
            raise ValueError("need 0 <= min_len <= max_len")


@dataclass
class FilterReport:
    """Per-rule accounting; kept + sum(dropped) == input."""

    input: int = 0
    kept: int = 0
    dropped: dict = field(default_factory=lambda: {"length": 0, "repetition": 0, "duplicate": 0})
    mutated: dict = field(default_factory=lambda: {"emoji": 0})

    def to_json(self) -> dict:
        return {
            "input": self.input,
            "kept": self.kept,
            "dropped": dict(self.dropped),
            "mutated": dict(self.mutated),
        }


def repetition_ratio(text: str, n: int = 3) -> float:
    """1 - (distinct word n-grams / total word n-grams); 0 when total <= 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    words = text.split()
    total = len(words) - n + 1
    if total <= 1:
        return 0.0
    grams = {tuple(words[i:i + n]) for i in range(total)}
    return 1.0 - len(grams) / total


def strip_emoji(text: str) -> str:
    """Remove emoji code points; whitespace each removal leaves behind is
    collapsed to one space (trimmed at the ends). Text without emoji is
    returned unchanged."""

    def repl(match: "re.Match") -> str:
        if match.start() == 0 or match.end() == len(text):
            return ""
        return " " if any(ch.isspace() for ch in match.group()) else ""

    return _EMOJI_RUN.sub(repl, text)


def _canonical(text: str) -> str:
    return " ".join(unicodedata.normalize("NFC", text).lower().split())


def dedup_key(item, fields: Optional[Tuple[str, ...]] = None) -> str:
    """SHA-256 over the canonicalized (instruction-like, answer-like) pair.

    Canonicalization: NFC normalize, lowercase, collapse whitespace. Samples
    key on (record_id, answer); records on (instruction, gold_response).
    Pass explicit attribute names in `fields` to override.
    """
    if fields:
        parts = [getattr(item, f) or "" for f in fields]
    elif isinstance(item, ReasoningSample):
        parts = [item.record_id, item.answer]
    else:
        parts = [item.instruction, item.gold_response or ""]
    blob = "\x1f".join(_canonical(p) for p in parts)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _primary_text(item) -> str:
    """The text the length and repetition rules judge."""
    if isinstance(item, ReasoningSample):
        return item.answer
    return item.gold_response if item.gold_response is not None else item.instruction


def _strip_item(item):
    """Strip emoji from every text field; returns (item, changed)."""
    if isinstance(item, ReasoningSample):
        updates = {}
        answer = strip_emoji(item.answer)
        if answer != item.answer:
            updates["answer"] = answer
        if item.reasoning is not None:
            reasoning = strip_emoji(item.reasoning)
            if reasoning != item.reasoning:
                updates["reasoning"] = reasoning
    else:
        updates = {}
        for name in ("instruction", "context", "gold_response"):
            value = getattr(item, name)
            if value is None:
                continue
            cleaned = strip_emoji(value)
            if cleaned != value:
                updates[name] = cleaned
    if not updates:
        return item, False
    return dataclasses.replace(item, **updates), True


def run_filters(corpus: Corpus, config: FilterConfig = FilterConfig()):
    """Apply the rule pipeline; returns (filtered Corpus, FilterReport).

    Kept items appear in input order; an item is charged to exactly one drop
    rule (the first that rejects it).
    """
    report = FilterReport(input=len(corpus.items))
    kept: list = []
    seen: set = set()
    for item in corpus.items:
        item, changed = _strip_item(item)
        if changed:
            report.mutated["emoji"] += 1
        text = _primary_text(item)
        if not (config.min_len <= len(text) <= config.max_len):
            report.dropped["length"] += 1
            continue
        if repetition_ratio(text, config.ngram_n) > config.repetition_threshold:
            report.dropped["repetition"] += 1
            continue
        key = dedup_key(item, config.dedup_fields)
        if key in seen:
            report.dropped["duplicate"] += 1
            continue
        seen.add(key)
        kept.append(item)
    report.kept = len(kept)
    return Corpus(items=kept, provenance=dict(corpus.provenance)), report
