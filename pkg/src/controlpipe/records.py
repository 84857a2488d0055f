"""Canonical data model and JSON Lines persistence for every pipeline stage.

Two row schemas flow through the pipeline:

  record: {"id", "lang", "context"?, "instruction", "gold_response"?, "source"}
  sample: {"record_id", "mode", "reasoning"?, "answer", "meta"}

Optional fields are omitted (never null) so dedup hashing stays canonical.
A corpus may carry a provenance object; when non-empty it is written as a
single leading line {"_provenance": {...}} that readers consume, so a corpus
with empty provenance serializes to exactly one line per row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Union

from .errors import ControlPipeError
from .markers import ReasoningMode

LANGS = ("en", "ko")
PROVENANCE_KEY = "_provenance"


class SchemaError(ControlPipeError):
    """A row violates the record/sample schema."""


class CorpusIOError(ControlPipeError):
    """A corpus file could not be read or written."""


@dataclass(frozen=True)
class InstructionRecord:
    """One sourced instruction with optional raw context and gold response."""

    id: str
    lang: str
    instruction: str
    source: str
    context: Optional[str] = None
    gold_response: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise SchemaError("record id must be non-empty")
        if self.lang not in LANGS:
            raise SchemaError(f"lang must be one of {LANGS}, got {self.lang!r}")
        if not self.instruction:
            raise SchemaError("instruction must be non-empty")

    def to_row(self) -> dict:
        row: dict = {"id": self.id, "lang": self.lang}
        if self.context is not None:
            row["context"] = self.context
        row["instruction"] = self.instruction
        if self.gold_response is not None:
            row["gold_response"] = self.gold_response
        row["source"] = self.source
        return row

    @classmethod
    def from_row(cls, row: dict) -> "InstructionRecord":
        if not isinstance(row, dict):
            raise SchemaError("record row must be an object")
        try:
            return cls(
                id=_req_str(row, "id"),
                lang=_req_str(row, "lang"),
                instruction=_req_str(row, "instruction"),
                source=_req_str(row, "source"),
                context=_opt_str(row, "context"),
                gold_response=_opt_str(row, "gold_response"),
            )
        except SchemaError:
            raise
        except (KeyError, TypeError) as exc:
            raise SchemaError(str(exc)) from exc


@dataclass(frozen=True)
class ReasoningSample:
    """An (instruction, reasoning, answer) training row tagged with its mode.

    Direct-mode samples carry no reasoning; every other mode requires one.
    """

    record_id: str
    mode: ReasoningMode
    answer: str
    reasoning: Optional[str] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.record_id:
            raise SchemaError("record_id must be non-empty")
        if not self.answer:
            raise SchemaError("answer must be non-empty")
        if (self.mode is ReasoningMode.DIRECT) != (self.reasoning is None):
            raise SchemaError(
                "reasoning must be absent exactly when mode is direct "
                f"(mode={self.mode.wire}, reasoning present={self.reasoning is not None})"
            )
        for key, value in self.meta.items():
            if not isinstance(key, str) or not isinstance(value, str):
                raise SchemaError("meta must map strings to strings")

    def to_row(self) -> dict:
        row: dict = {"record_id": self.record_id, "mode": self.mode.wire}
        if self.reasoning is not None:
            row["reasoning"] = self.reasoning
        row["answer"] = self.answer
        row["meta"] = dict(sorted(self.meta.items()))
        return row

    @classmethod
    def from_row(cls, row: dict) -> "ReasoningSample":
        if not isinstance(row, dict):
            raise SchemaError("sample row must be an object")
        meta = row.get("meta", {})
        if not isinstance(meta, dict):
            raise SchemaError("meta must be an object")
        try:
            mode = ReasoningMode.from_wire(_req_str(row, "mode"))
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc
        return cls(
            record_id=_req_str(row, "record_id"),
            mode=mode,
            answer=_req_str(row, "answer"),
            reasoning=_opt_str(row, "reasoning"),
            meta=dict(meta),
        )

    def with_meta(self, **entries: str) -> "ReasoningSample":
        merged = dict(self.meta)
        merged.update(entries)
        return replace(self, meta=merged)


Item = Union[InstructionRecord, ReasoningSample]

_SCHEMAS = {"record": InstructionRecord, "sample": ReasoningSample}


def _req_str(row: dict, key: str) -> str:
    value = row.get(key)
    if not isinstance(value, str):
        raise SchemaError(f"field {key!r} must be a string, got {type(value).__name__}")
    return value


def _opt_str(row: dict, key: str) -> Optional[str]:
    value = row.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        raise SchemaError(f"field {key!r} must be a string when present")
    return value


@dataclass
class Corpus:
    """An ordered, immutable-after-load sequence of records or samples."""

    items: list
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[Item]:
        return iter(self.items)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return self.items == other.items and self.provenance == other.provenance


def read_corpus(path, schema: str):
    """Load a JSONL corpus; returns (Corpus, rejected-row count).

    Malformed lines are collected (not fatal) and written with their parse
    errors to a sibling `<path>.rejects` file when any exist. An unreadable
    file raises CorpusIOError.
    """
    if schema not in _SCHEMAS:
        raise ValueError(f"schema must be one of {sorted(_SCHEMAS)}")
    row_cls = _SCHEMAS[schema]
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusIOError(f"cannot read corpus {path}: {exc}") from exc

    items: list = []
    rejects: list = []
    provenance: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append({"line": lineno, "error": f"invalid json: {exc}", "raw": line})
            continue
        if lineno == 1 and isinstance(row, dict) and PROVENANCE_KEY in row:
            provenance = dict(row[PROVENANCE_KEY])
            continue
        try:
            items.append(row_cls.from_row(row))
        except SchemaError as exc:
            rejects.append({"line": lineno, "error": str(exc), "raw": line})

    if rejects:
        reject_path = path.with_name(path.name + ".rejects")
        with reject_path.open("w", encoding="utf-8") as fh:
            for row in rejects:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    return Corpus(items=items, provenance=provenance), len(rejects)


def write_corpus(corpus: Corpus, path) -> int:
    """Serialize a corpus to JSONL; returns the number of item rows written.

    Writing the same corpus twice yields byte-identical files: field order is
    fixed by the row builders and meta keys are sorted.
    """
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            if corpus.provenance:
                header = {PROVENANCE_KEY: dict(sorted(corpus.provenance.items()))}
                fh.write(json.dumps(header, ensure_ascii=False) + "\n")
            for item in corpus.items:
                fh.write(json.dumps(item.to_row(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise CorpusIOError(f"cannot write corpus {path}: {exc}") from exc
    return len(corpus.items)


def schema_of(corpus: Corpus) -> str:
    """Infer the row schema of a non-empty corpus."""
    if not corpus.items:
        raise ValueError("cannot infer schema of an empty corpus")
    return "record" if isinstance(corpus.items[0], InstructionRecord) else "sample"
