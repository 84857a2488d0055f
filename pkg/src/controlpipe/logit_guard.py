"""Script-restricted sampling: mask banned-token logits before the softmax.

Tokens whose text contains characters from a restricted script are driven to
exactly zero probability by replacing their logits with a sentinel so large
and negative that exp() underflows to 0 after max-subtraction. Allowed-token
odds are untouched. A small sampling loop applies the mask at every step so
generated sequences can never contain restricted tokens.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ControlPipeError

# Realization of the -inf mask: most negative finite float64. After
# max-subtraction exp() of it underflows to exactly 0.0, so banned entries
# get zero probability without IEEE-infinity plumbing.
MASK_VALUE = float(np.finfo(np.float64).min)


class ScriptConfigError(ControlPipeError):
    """A restricted-script name is not in the supported table."""


class MaskIndexError(ControlPipeError):
    """A banned index lies outside the vocabulary."""


class DegenerateDistribution(ControlPipeError):
    """Every vocabulary entry was masked; no token can be sampled."""


# Unicode block ranges per supported script (inclusive code-point bounds).
# Latin, Hangul, Han, digits, and common punctuation are never listed here
# and therefore always allowed.
SCRIPT_RANGES: dict = {
    "arabic": (
        (0x0600, 0x06FF),
        (0x0750, 0x077F),
        (0x0870, 0x089F),
        (0x08A0, 0x08FF),
        (0xFB50, 0xFDFF),
        (0xFE70, 0xFEFF),
    ),
    "cyrillic": (
        (0x0400, 0x04FF),
        (0x0500, 0x052F),
        (0x1C80, 0x1C8F),
        (0x2DE0, 0x2DFF),
        (0xA640, 0xA69F),
    ),
    "greek": ((0x0370, 0x03FF), (0x1F00, 0x1FFF)),
    "hebrew": ((0x0590, 0x05FF), (0xFB1D, 0xFB4F)),
    "thai": ((0x0E00, 0x0E7F),),
    "devanagari": ((0x0900, 0x097F), (0xA8E0, 0xA8FF)),
    "armenian": ((0x0530, 0x058F), (0xFB13, 0xFB17)),
    "georgian": ((0x10A0, 0x10FF), (0x1C90, 0x1CBF), (0x2D00, 0x2D2F)),
}

DEFAULT_BAN_SCRIPTS = ("arabic", "cyrillic")


@dataclass(frozen=True)
class Vocabulary:
    """Dense, ordered token table; index i names tokens[i]."""

    tokens: tuple

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise ValueError("vocabulary must contain at least one token")

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RestrictedSet:
    """Banned token indices plus the script list they were derived from."""

    banned: frozenset
    scripts: tuple = ()


def _merged_ranges(scripts: Iterable[str]):
    starts: list = []
    ends: list = []
    for name in scripts:
        key = name.strip().lower()
        if key not in SCRIPT_RANGES:
            raise ScriptConfigError(
                f"unsupported script {name!r}; supported: {', '.join(sorted(SCRIPT_RANGES))}"
            )
        for lo, hi in SCRIPT_RANGES[key]:
            starts.append(lo)
            ends.append(hi)
    order = sorted(range(len(starts)), key=starts.__getitem__)
    return [starts[i] for i in order], [ends[i] for i in order]


def char_in_scripts(ch: str, scripts: Sequence[str]) -> bool:
    """True when the character's code point falls in any listed script range."""
    starts, ends = _merged_ranges(scripts)
    cp = ord(ch)
    i = bisect.bisect_right(starts, cp) - 1
    return i >= 0 and cp <= ends[i]


def derive_restricted_set(vocab: Vocabulary, scripts: Sequence[str]) -> RestrictedSet:
    """Ban every token containing at least one character of a listed script.

    Any-character matching is deliberately conservative: a mixed-script token
    is banned outright.
    """
    normalized = tuple(s.strip().lower() for s in scripts if s.strip())
    starts, ends = _merged_ranges(normalized)
    if not starts:
        return RestrictedSet(banned=frozenset(), scripts=normalized)

    def hit(token: str) -> bool:
        for ch in token:
            cp = ord(ch)
            i = bisect.bisect_right(starts, cp) - 1
            if i >= 0 and cp <= ends[i]:
                return True
        return False

    banned = frozenset(i for i, tok in enumerate(vocab.tokens) if hit(tok))
    return RestrictedSet(banned=banned, scripts=normalized)


def mask_logits(z, banned: RestrictedSet) -> np.ndarray:
    """Copy of z with banned indices forced to the mask sentinel."""
    scores = np.asarray(z, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("logits must be a 1-D vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("logits must be finite before masking")
    out = scores.copy()
    if banned.banned:
        idx = np.fromiter(banned.banned, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= scores.shape[0]:
            raise MaskIndexError(
                f"banned index out of range for vocabulary of size {scores.shape[0]}"
            )
        out[idx] = MASK_VALUE
    return out


def softmax(z) -> np.ndarray:
    """Numerically safe softmax (max-subtraction), no masking semantics."""
    scores = np.asarray(z, dtype=np.float64)
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def masked_softmax(z_masked) -> np.ndarray:
    """Probabilities over a masked logit vector.

    Masked entries (<= MASK_VALUE, including -inf) come out exactly 0;
    allowed entries are proportional to exp(z_i). Raises
    DegenerateDistribution when everything is masked.
    """
    scores = np.asarray(z_masked, dtype=np.float64)
    banned = scores <= MASK_VALUE
    if banned.all():
        raise DegenerateDistribution("all vocabulary entries are masked")
    allowed = ~banned
    probs = np.zeros_like(scores)
    shifted = scores[allowed] - scores[allowed].max()
    probs[allowed] = np.exp(shifted)
    probs /= probs.sum()
    return probs


NextLogits = Callable[[tuple], object]


def guarded_sample(
    next_logits: NextLogits,
    vocab: Vocabulary,
    banned: RestrictedSet,
    max_len: int,
    rng_seed: int,
    eos_index=None,
) -> list:
    """Sample up to max_len token indices, masking banned tokens every step.

    next_logits receives the emitted prefix (tuple of indices) and must
    return a logit vector of vocabulary size. Sampling is inverse-CDF over
    the masked softmax, so banned indices (exactly zero mass) can never be
    drawn. Deterministic for a fixed seed.
    """
    if max_len < 0:
        raise ValueError("max_len must be >= 0")
    rng = np.random.default_rng(rng_seed)
    out: list = []
    for _ in range(max_len):
        z = np.asarray(next_logits(tuple(out)), dtype=np.float64)
        if z.shape != (vocab.size,):
            raise ValueError(f"next_logits returned shape {z.shape}, expected ({vocab.size},)")
        probs = masked_softmax(mask_logits(z, banned))
        cum = np.cumsum(probs)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        if idx >= vocab.size:
            # Floating edge: u landed at/above the final cumulative value.
            idx = int(np.flatnonzero(probs > 0.0)[-1])
        out.append(idx)
        if eos_index is not None and idx == eos_index:
            break
    return out
