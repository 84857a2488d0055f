"""Synthetic-corpus construction: marker-conditioned generation from
instructions or raw contexts, judge-based verification with threshold
gating, and multi-length reasoning condensation.

Prompt templates live in the package's prompts/ directory as editable text
assets with literal {Name} placeholders (plain string replacement, so
template bodies may contain braces). Pass prompts_dir to any entry point to
override them.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Tuple

from .backend import BackendError, GenRequest, generate_batch
from .errors import ControlPipeError
from .markers import (
    MarkerError,
    ReasoningMode,
    build_prompt,
    parse_response,
    validate,
    whitespace_tokenizer,
)
from .records import Corpus, InstructionRecord, ReasoningSample

log = logging.getLogger(__name__)

DEFAULT_VERIFY_THRESHOLD = 7
BUDGET_SLACK = 0.2
CONDENSE_MODES = (ReasoningMode.SHORT, ReasoningMode.MEDIUM, ReasoningMode.LONG)

_FIRST_INT = re.compile(r"(?<!\d)\d+(?!\d)")


class InvalidGeneration(ControlPipeError):
    """A generated output failed structural parsing or mode validation."""

    def __init__(self, reason: str, record_id: str, mode: ReasoningMode, raw: str):
        super().__init__(f"{reason} for record {record_id} ({mode.wire})")
        self.reason = reason
        self.record_id = record_id
        self.mode = mode
        self.raw = raw

    def to_row(self) -> dict:
        return {
            "record_id": self.record_id,
            "mode": self.mode.wire,
            "reason": self.reason,
            "raw": self.raw,
        }


class StageOneEmpty(ControlPipeError):
    """Context-grounded generation produced an empty synthetic instruction."""


class VerdictUnparsable(ControlPipeError):
    """Judge output contains no standalone integer."""


class VerdictOutOfRange(ControlPipeError):
    """Judge output's first integer lies outside 0-10."""


class CondenseUnparsable(ControlPipeError):
    """Condensation output is not a JSON object with a Reasoning string."""


class OverBudget(ControlPipeError):
    """Condensed reasoning still exceeds its word budget after retry."""


def load_prompt(name: str, prompts_dir=None) -> str:
    if prompts_dir is not None:
        return (Path(prompts_dir) / f"{name}.txt").read_text(encoding="utf-8")
    pkg = resources.files("controlpipe")
    return pkg.joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def word_count(text: str) -> int:
    return len(whitespace_tokenizer(text))


@dataclass(frozen=True)
class VerifierVerdict:
    """Judge score on the 0-10 alignment scale, gated by a threshold."""

    score: int
    threshold: int
    passed: bool
    raw: str

    def __post_init__(self) -> None:
        if not 0 <= self.score <= 10:
            raise ValueError("score must lie in 0..10")
        if self.passed != (self.score >= self.threshold):
            raise ValueError("passed must equal score >= threshold")


@dataclass(frozen=True)
class CondensedSet:
    """All three condensed variants of one reasoning text."""

    original: str
    short: str
    medium: str
    long: str

    def text_for(self, mode: ReasoningMode) -> str:
        return {
            ReasoningMode.SHORT: self.short,
            ReasoningMode.MEDIUM: self.medium,
            ReasoningMode.LONG: self.long,
        }[mode]


def _sample_from_output(
    record_id: str, mode: ReasoningMode, raw: str, backend_name: str
) -> ReasoningSample:
    """Parse and validate a raw model output into a sample, or raise
    InvalidGeneration (the caller keeps it for reject stats)."""
    if not raw or not raw.strip():
        raise InvalidGeneration("empty_output", record_id, mode, raw)
    try:
        parsed = parse_response(raw)
    except MarkerError as exc:
        raise InvalidGeneration(type(exc).__name__, record_id, mode, raw) from exc
    if not validate(parsed, mode):
        reason = "missing_reasoning" if mode.requires_reasoning() else "unexpected_reasoning"
        raise InvalidGeneration(reason, record_id, mode, raw)
    if not parsed.answer.strip():
        raise InvalidGeneration("empty_answer", record_id, mode, raw)
    return ReasoningSample(
        record_id=record_id,
        mode=mode,
        answer=parsed.answer,
        reasoning=parsed.reasoning,
        meta={"backend": backend_name, "valid": "true"},
    )


def gen_from_instruction(
    record: InstructionRecord, mode: ReasoningMode, backend
) -> ReasoningSample:
    """Generate one sample by prompting with the record's own instruction."""
    prompt = build_prompt(record.instruction, mode)
    result = backend.generate(GenRequest(user=prompt))
    return _sample_from_output(record.id, mode, result.text, backend.name)


def gen_from_context(
    record: InstructionRecord,
    backend,
    mode: ReasoningMode = ReasoningMode.MAX,
    prompts_dir=None,
) -> Tuple[str, ReasoningSample]:
    """Two-stage context-grounded generation.

    Stage 1 asks for a plausible instruction conditioned on the record's raw
    context; stage 2 answers that instruction grounded in the same context.
    Both prompts embed the context verbatim. Returns the synthetic
    instruction alongside the sample (which also carries it in meta).
    """
    if not record.context:
        raise ValueError(f"record {record.id} has no context")
    q_template = load_prompt("context_question", prompts_dir)
    a_template = load_prompt("context_answer", prompts_dir)

    stage1 = backend.generate(GenRequest(user=q_template.replace("{Context}", record.context)))
    instruction = stage1.text.strip()
    if not instruction:
        raise StageOneEmpty(f"stage-1 produced no instruction for record {record.id}")

    answer_prompt = a_template.replace("{Context}", record.context).replace(
        "{Instruction}", instruction
    )
    stage2 = backend.generate(GenRequest(user=build_prompt(answer_prompt, mode)))
    sample = _sample_from_output(record.id, mode, stage2.text, backend.name)
    return instruction, sample.with_meta(synthetic_instruction=instruction)


def generate_corpus(
    records: Sequence[InstructionRecord],
    mode: ReasoningMode,
    backend,
    strategy: str = "instruction",
    max_in_flight: int = 4,
    prompts_dir=None,
) -> Tuple[Corpus, list]:
    """Generate samples for a record batch; returns (corpus, reject rows).

    Invalid outputs (parse failures, marker/mode mismatches) are excluded
    from the corpus and reported as reject rows; backend errors per record
    are rejected likewise rather than aborting the batch.
    """
    if strategy not in ("instruction", "context"):
        raise ValueError("strategy must be 'instruction' or 'context'")
    samples: list = []
    rejects: list = []
    if strategy == "instruction":
        reqs = [GenRequest(user=build_prompt(r.instruction, mode)) for r in records]
        outputs = generate_batch(backend, reqs, max_in_flight)
        for record, out in zip(records, outputs):
            if isinstance(out, BackendError):
                rejects.append({"record_id": record.id, "mode": mode.wire,
                                "reason": type(out).__name__, "raw": str(out)})
                continue
            try:
                samples.append(_sample_from_output(record.id, mode, out.text, backend.name))
            except InvalidGeneration as exc:
                rejects.append(exc.to_row())
    else:
        for record in records:
            try:
                _, sample = gen_from_context(record, backend, mode, prompts_dir)
                samples.append(sample)
            except (InvalidGeneration,) as exc:
                rejects.append(exc.to_row())
            except (BackendError, StageOneEmpty, ValueError) as exc:
                rejects.append({"record_id": record.id, "mode": mode.wire,
                                "reason": type(exc).__name__, "raw": str(exc)})
    return Corpus(items=samples), rejects


def verify(
    sample: ReasoningSample,
    record: InstructionRecord,
    backend,
    threshold: int = DEFAULT_VERIFY_THRESHOLD,
    prompts_dir=None,
) -> VerifierVerdict:
    """Judge the sample's answer against the record's gold response.

    The judge prompt interpolates instruction, gold, and answer; its reply
    is parsed as the first standalone integer, which must lie in 0-10.
    """
    if not record.gold_response:
        raise ValueError(f"record {record.id} has no gold response to verify against")
    template = load_prompt("verifier", prompts_dir)
    prompt = (
        template.replace("{Instruction}", record.instruction)
        .replace("{PreferredAnswer}", record.gold_response)
        .replace("{Response}", sample.answer)
    )
    result = backend.generate(GenRequest(user=prompt))
    match = _FIRST_INT.search(result.text)
    if match is None:
        raise VerdictUnparsable(f"no integer in judge output: {result.text[:80]!r}")
    score = int(match.group())
    if score > 10:
        raise VerdictOutOfRange(f"judge score {score} outside 0-10")
    return VerifierVerdict(score=score, threshold=threshold,
                           passed=score >= threshold, raw=result.text)


@dataclass
class VerificationStats:
    verified: int = 0
    passed: int = 0
    failed: int = 0
    skipped_no_gold: int = 0
    unparsable: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def verify_corpus(
    samples: Corpus,
    records: Sequence[InstructionRecord],
    backend,
    threshold: int = DEFAULT_VERIFY_THRESHOLD,
    prompts_dir=None,
) -> Tuple[Corpus, VerificationStats]:
    """Gate a sample corpus on judge verdicts.

    Samples whose source record has a gold response are verified and kept
    only when the verdict passes; samples with no gold are kept but flagged
    (meta verify=skipped_no_gold). No gold-bearing sample bypasses the
    judge.
    """
    by_id = {r.id: r for r in records}
    stats = VerificationStats()
    kept: list = []
    for sample in samples:
        record = by_id.get(sample.record_id)
        if record is None or not record.gold_response:
            stats.skipped_no_gold += 1
            kept.append(sample.with_meta(verify="skipped_no_gold"))
            continue
        try:
            verdict = verify(sample, record, backend, threshold, prompts_dir)
        except (VerdictUnparsable, VerdictOutOfRange) as exc:
            stats.unparsable += 1
            log.warning("verdict unusable for %s: %s", sample.record_id, exc)
            continue
        stats.verified += 1
        if verdict.passed:
            stats.passed += 1
            kept.append(sample.with_meta(verify="passed", verifier_score=str(verdict.score)))
        else:
            stats.failed += 1
    return Corpus(items=kept, provenance=dict(samples.provenance)), stats


def _extract_condensed(text: str) -> str:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        obj = None
        if start != -1 and end > start:
            try:
                obj = json.loads(text[start:end + 1])
            except json.JSONDecodeError:
                pass
        if obj is None:
            raise CondenseUnparsable(f"not JSON: {text[:80]!r}") from None
    if not isinstance(obj, dict) or not isinstance(obj.get("Reasoning"), str):
        raise CondenseUnparsable("JSON object lacks a string 'Reasoning' key")
    return obj["Reasoning"]


def condense(
    reasoning: str,
    mode: ReasoningMode,
    backend,
    budget: Optional[int] = None,
    slack: float = BUDGET_SLACK,
    prompts_dir=None,
) -> str:
    """Rewrite a reasoning text to fit the mode's word budget.

    Texts already within budget pass through unchanged. One retry is allowed
    for malformed JSON or an over-budget result; hard truncation is never
    applied (it would cut the concluding sentence).
    """
    budget = budget if budget is not None else mode.word_budget()
    if budget is None:
        raise ValueError(f"mode {mode.wire} has no word budget")
    if word_count(reasoning) <= budget:
        return reasoning
    template = load_prompt("condense", prompts_dir)
    prompt = template.replace("{Reasoning}", reasoning).replace("{N_mode}", str(budget))
    limit = int(budget * (1.0 + slack))
    last_error: ControlPipeError = OverBudget("condensation never attempted")
    for attempt in range(2):
        result = backend.generate(GenRequest(user=prompt, seed=attempt))
        try:
            condensed = _extract_condensed(result.text)
        except CondenseUnparsable as exc:
            last_error = exc
            continue
        if word_count(condensed) <= limit:
            return condensed
        last_error = OverBudget(
            f"{word_count(condensed)} words exceeds limit {limit} for {mode.wire}"
        )
    raise last_error


def condense_set(reasoning: str, backend, prompts_dir=None) -> CondensedSet:
    """Condense one reasoning text into all three budgeted variants."""
    texts = {
        mode: condense(reasoning, mode, backend, prompts_dir=prompts_dir)
        for mode in CONDENSE_MODES
    }
    return CondensedSet(
        original=reasoning,
        short=texts[ReasoningMode.SHORT],
        medium=texts[ReasoningMode.MEDIUM],
        long=texts[ReasoningMode.LONG],
    )


@dataclass
class MultiLengthReport:
    instances: int = 0
    emitted: int = 0
    passthrough_direct: int = 0
    dropped_instances: int = 0
    failures: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "instances": self.instances,
            "emitted": self.emitted,
            "passthrough_direct": self.passthrough_direct,
            "dropped_instances": self.dropped_instances,
            "failures": list(self.failures),
        }


def build_multilength_corpus(
    corpus: Corpus, backend, prompts_dir=None
) -> Tuple[Corpus, MultiLengthReport]:
    """Expand reasoning-bearing samples into four length-tagged variants.

    Each instance emits its original (max-mode) reasoning plus short, medium,
    and long condensations, tagged so prompt construction picks the matching
    length markers. Per-variant failures are logged and skipped; an instance
    is kept only if at least one condensation succeeds. Direct samples pass
    through unchanged.
    """
    report = MultiLengthReport()
    out: list = []
    for index, sample in enumerate(corpus):
        if sample.reasoning is None:
            report.passthrough_direct += 1
            out.append(sample)
            continue
        report.instances += 1
        instance = str(index)
        variants: list = []
        for mode in CONDENSE_MODES:
            try:
                text = condense(sample.reasoning, mode, backend, prompts_dir=prompts_dir)
            except (CondenseUnparsable, OverBudget, BackendError) as exc:
                report.failures.append(
                    {"record_id": sample.record_id, "mode": mode.wire,
                     "reason": type(exc).__name__}
                )
                log.warning("condense %s failed for %s: %s", mode.wire, sample.record_id, exc)
                continue
            variants.append(
                ReasoningSample(
                    record_id=sample.record_id,
                    mode=mode,
                    answer=sample.answer,
                    reasoning=text,
                    meta={
                        **sample.meta,
                        "instance": instance,
                        "budget": str(mode.word_budget()),
                        "word_count": str(word_count(text)),
                    },
                )
            )
        if not variants:
            report.dropped_instances += 1
            continue
        original = sample if sample.mode is ReasoningMode.MAX else None
        if original is None:
            # Re-tag non-max reasoning samples so markers stay consistent.
            original = ReasoningSample(
                record_id=sample.record_id,
                mode=ReasoningMode.MAX,
                answer=sample.answer,
                reasoning=sample.reasoning,
                meta=sample.meta,
            )
        out.append(original.with_meta(instance=instance,
                                      word_count=str(word_count(sample.reasoning))))
        out.extend(variants)
        report.emitted += 1 + len(variants)
    return Corpus(items=out, provenance=dict(corpus.provenance)), report


def budget_ordering_violations(corpus: Corpus) -> Tuple[int, int]:
    """Count instances whose condensed word counts break short <= medium <= long.

    Returns (violations, instances-with-all-three-variants). Enforcement
    clamps at generation time; this is the corpus-level audit.
    """
    groups: dict = {}
    for sample in corpus:
        instance = sample.meta.get("instance")
        if instance is None or sample.reasoning is None:
            continue
        groups.setdefault((sample.record_id, instance), {})[sample.mode] = word_count(
            sample.reasoning
        )
    violations = 0
    checked = 0
    for counts in groups.values():
        if not all(m in counts for m in CONDENSE_MODES):
            continue
        checked += 1
        if not (
            counts[ReasoningMode.SHORT]
            <= counts[ReasoningMode.MEDIUM]
            <= counts[ReasoningMode.LONG]
        ):
            violations += 1
    return violations, checked
