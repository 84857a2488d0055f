"""Pure numerical core for training: hybrid negative log-likelihood over
reasoning/direct targets, the binary model-based reward gate, and the
clipped-ratio policy surrogate. Everything operates on plain per-token
log-probability sequences, so callers own tokenization and model plumbing.

The surrogate is a maximization objective: trainers ascend the returned
value (or descend its negation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ControlPipeError, EmptyBatch
from .logit_guard import softmax  # single softmax implementation, shared

# Reward-model probability gate: strictly greater than this passes.
REWARD_PROB_THRESHOLD = 0.4

# Ratio exponent guard: differences beyond this many nats overflow float64
# exp() into meaninglessness, so the step is rejected instead.
RATIO_OVERFLOW_NATS = 80.0

__all__ = [
    "TokenLogProbs",
    "HybridExample",
    "PPOStep",
    "RewardInput",
    "RatioOverflow",
    "nll",
    "hybrid_loss",
    "reward",
    "ppo_term",
    "ppo_objective",
    "softmax",
    "REWARD_PROB_THRESHOLD",
    "RATIO_OVERFLOW_NATS",
]


class RatioOverflow(ControlPipeError):
    """new/old probability ratio too large to exponentiate."""


@dataclass(frozen=True)
class TokenLogProbs:
    """Per-token log-probabilities of one target sequence (each <= 0)."""

    values: tuple

    def __post_init__(self) -> None:
        if len(self.values) < 1:
            raise ValueError("need at least one token log-probability")
        for v in self.values:
            if not math.isfinite(v) or v > 0.0:
                raise ValueError(f"log-probabilities must be finite and <= 0, got {v}")

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def of(cls, values: Sequence[float]) -> "TokenLogProbs":
        return cls(tuple(float(v) for v in values))


@dataclass(frozen=True)
class HybridExample:
    """One training example with an indicator selecting its response style.

    p == 1 selects the reasoning-target loss, p == 0 the direct-target loss;
    the selected side must be present (the other may be too).
    """

    p: int
    reason_logprobs: Optional[TokenLogProbs] = None
    direct_logprobs: Optional[TokenLogProbs] = None

    def __post_init__(self) -> None:
        if self.p not in (0, 1):
            raise ValueError("indicator p must be 0 or 1")
        if self.p == 1 and self.reason_logprobs is None:
            raise ValueError("p == 1 requires reason_logprobs")
        if self.p == 0 and self.direct_logprobs is None:
            raise ValueError("p == 0 requires direct_logprobs")


@dataclass(frozen=True)
class PPOStep:
    """One timestep of the clipped surrogate: old/new log-probs of the taken
    action, the advantage estimate, and the clip width."""

    old_logprob: float
    new_logprob: float
    advantage: float
    epsilon: float

    def __post_init__(self) -> None:
        for name in ("old_logprob", "new_logprob", "advantage"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class RewardInput:
    """Reward-model correct-label probability plus structural validity."""

    correct_prob: float
    valid: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.correct_prob <= 1.0:
            raise ValueError("correct_prob must lie in [0, 1]")


def nll(seq: TokenLogProbs) -> float:
    """Negative log-likelihood: minus the sum of per-token log-probs."""
    return -math.fsum(seq.values)


def hybrid_loss(batch: Sequence[HybridExample]) -> float:
    """Batch mean of the indicator-selected NLL.

    Each example contributes its reasoning-target loss when p == 1 and its
    direct-target loss when p == 0.
    """
    if not batch:
        raise EmptyBatch("hybrid_loss needs a non-empty batch")
    total = math.fsum(
        nll(ex.reason_logprobs) if ex.p == 1 else nll(ex.direct_logprobs)
        for ex in batch
    )
    return total / len(batch)


def reward(inp: RewardInput) -> int:
    """Binary reward: 1 iff correct_prob strictly exceeds the gate AND the
    response is structurally valid for its mode; else 0."""
    return 1 if (inp.correct_prob > REWARD_PROB_THRESHOLD and inp.valid) else 0


def ppo_term(step: PPOStep) -> float:
    """min(r * A, clip(r, 1-eps, 1+eps) * A) with r = exp(new - old)."""
    delta = step.new_logprob - step.old_logprob
    if delta > RATIO_OVERFLOW_NATS:
        raise RatioOverflow(f"log-ratio {delta:.3g} exceeds {RATIO_OVERFLOW_NATS} nats")
    ratio = math.exp(delta)
    clipped = min(max(ratio, 1.0 - step.epsilon), 1.0 + step.epsilon)
    return min(ratio * step.advantage, clipped * step.advantage)


def ppo_objective(steps: Sequence[PPOStep]) -> float:
    """Timestep mean of the clipped surrogate."""
    if not steps:
        raise EmptyBatch("ppo_objective needs at least one step")
    return math.fsum(ppo_term(s) for s in steps) / len(steps)
