"""Desk-scale trainable policy exercising the hybrid loss and the clipped
policy surrogate end to end.

The policy is an order-2 Markov feature table: each context (previous two
tokens) indexes a logit row over a 30-symbol vocabulary. Gradients of the
softmax NLL are written by hand and checked against finite differences, so
the training mechanics (not model capacity) are what gets tested. The toy
task is single-digit addition with sums capped at 9; reasoning targets
spell the computation inside think delimiters using scaffold letters, which
keeps the bigram contexts of reasoning and direct targets disjoint so one
table can serve both modes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ControlPipeError, EmptyBatch
from .markers import (
    BASE_MARKER,
    THINK_CLOSE,
    THINK_OPEN,
    MarkerError,
    ReasoningMode,
    parse_response,
    validate,
)
from .train_math import (
    HybridExample,
    PPOStep,
    RatioOverflow,
    RewardInput,
    TokenLogProbs,
    hybrid_loss,
    ppo_objective,
    reward,
)

EOS = "<eos>"
PAD = "<pad>"  # context padding sentinel, not a vocabulary symbol

DIGITS = tuple(str(d) for d in range(10))
LETTERS = tuple("abcdefghijklmn")
VOCAB: Tuple[str, ...] = DIGITS + ("+", "=") + (THINK_OPEN, THINK_CLOSE, BASE_MARKER) + (EOS,) + LETTERS
assert len(VOCAB) == 30


class VocabError(ControlPipeError):
    """A token outside the policy vocabulary was supplied."""


class EmptyTarget(ControlPipeError):
    """A scoring call received an empty target sequence."""


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - (m + np.log(np.exp(z - m).sum()))


class ToyPolicy:
    """Context-feature -> logit-row table; absent rows act as zeros (uniform)."""

    def __init__(self, vocab: Sequence[str] = VOCAB, order: int = 2, seed: int = 0):
        self.vocab = tuple(vocab)
        self.order = order
        self.seed = seed
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.params: dict = {}

    @property
    def size(self) -> int:
        return len(self.vocab)

    def logits(self, ctx: tuple) -> np.ndarray:
        row = self.params.get(ctx)
        return row if row is not None else np.zeros(self.size)

    def row(self, ctx: tuple) -> np.ndarray:
        row = self.params.get(ctx)
        if row is None:
            row = np.zeros(self.size)
            self.params[ctx] = row
        return row

    def randomize(self, scale: float = 0.5, n_rows: int = 20, seed: Optional[int] = None) -> None:
        """Populate random feature rows (for gradient-check harnesses)."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        for _ in range(n_rows):
            ctx = tuple(self.vocab[i] for i in rng.integers(0, self.size, size=self.order))
            self.params[ctx] = rng.normal(0.0, scale, size=self.size)

    def contexts(self, prompt: Sequence[str], target: Sequence[str]) -> List[tuple]:
        seq = (PAD,) * self.order + tuple(prompt) + tuple(target)
        base = self.order + len(prompt)
        return [tuple(seq[base + t - self.order: base + t]) for t in range(len(target))]

    def check_tokens(self, tokens: Sequence[str]) -> None:
        for tok in tokens:
            if tok not in self.index:
                raise VocabError(f"token {tok!r} not in vocabulary")


@dataclass(frozen=True)
class HybridSource:
    """A (prompt, target) pair with its response-style indicator."""

    prompt: Tuple[str, ...]
    target: Tuple[str, ...]
    p: int


def logprob_of(policy: ToyPolicy, prompt: Sequence[str], target: Sequence[str]) -> TokenLogProbs:
    """Per-token log-probabilities of the target under teacher forcing."""
    policy.check_tokens(prompt)
    policy.check_tokens(target)
    if not target:
        raise EmptyTarget("target must contain at least one token")
    values = []
    for ctx, tok in zip(policy.contexts(prompt, target), target):
        lsm = log_softmax(policy.logits(ctx))
        values.append(float(lsm[policy.index[tok]]))
    return TokenLogProbs.of(values)


def hybrid_examples(policy: ToyPolicy, sources: Sequence[HybridSource]) -> List[HybridExample]:
    out = []
    for s in sources:
        lp = logprob_of(policy, s.prompt, s.target)
        if s.p == 1:
            out.append(HybridExample(p=1, reason_logprobs=lp))
        else:
            out.append(HybridExample(p=0, direct_logprobs=lp))
    return out


def hybrid_loss_of(policy: ToyPolicy, sources: Sequence[HybridSource]) -> float:
    return hybrid_loss(hybrid_examples(policy, sources))


def _loss_and_grads(policy: ToyPolicy, sources: Sequence[HybridSource]):
    """Hybrid loss plus dLoss/dlogits per touched context row.

    Softmax-NLL gradient per scored token: softmax(ctx) - onehot(target),
    scaled by 1/batch.
    """
    if not sources:
        raise EmptyBatch("need at least one training example")
    n = len(sources)
    grads: dict = {}
    total = 0.0
    for s in sources:
        policy.check_tokens(s.prompt)
        policy.check_tokens(s.target)
        if not s.target:
            raise EmptyTarget("target must contain at least one token")
        for ctx, tok in zip(policy.contexts(s.prompt, s.target), s.target):
            lsm = log_softmax(policy.logits(ctx))
            idx = policy.index[tok]
            total -= float(lsm[idx])
            g = grads.get(ctx)
            if g is None:
                g = np.zeros(policy.size)
                grads[ctx] = g
            g += np.exp(lsm)
            g[idx] -= 1.0
    for g in grads.values():
        g /= n
    return total / n, grads


def sft_step(policy: ToyPolicy, sources: Sequence[HybridSource], learning_rate: float) -> float:
    """One gradient-descent step on the hybrid loss; returns the pre-step loss."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    loss, grads = _loss_and_grads(policy, sources)
    if learning_rate > 0:
        for ctx, g in grads.items():
            policy.row(ctx)[:] -= learning_rate * g
    return loss


def grad_check(
    policy: ToyPolicy,
    sources: Sequence[HybridSource],
    epsilon_fd: float,
    n_coords: int = 120,
    seed: int = 0,
) -> float:
    """Max relative error of analytic gradients vs central finite differences
    over randomly chosen parameter coordinates."""
    if not 1e-6 <= epsilon_fd <= 1e-3:
        raise ValueError("epsilon_fd must lie in [1e-6, 1e-3]")
    _, grads = _loss_and_grads(policy, sources)
    coords = [(ctx, j) for ctx in grads for j in range(policy.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        chosen = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in chosen]
    worst = 0.0
    for ctx, j in coords:
        row = policy.row(ctx)
        orig = row[j]
        row[j] = orig + epsilon_fd
        plus = hybrid_loss_of(policy, sources)
        row[j] = orig - epsilon_fd
        minus = hybrid_loss_of(policy, sources)
        row[j] = orig
        fd = (plus - minus) / (2.0 * epsilon_fd)
        analytic = float(grads[ctx][j])
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-10)
        worst = max(worst, rel)
    return worst


@dataclass
class ToyTask:
    """Single-digit addition (sums <= 9) with mode-tagged targets.

    Reasoning targets restate the operands between scaffold letters before
    the result, e.g. prompt "3 + 4 =" with the base marker yields the target
    "<think> a 3 4 b 7 </think> 7 <eos>". Pairs are split into train and
    held-out evaluation sets.
    """

    seed: int = 0
    holdout_fraction: float = 0.2
    train_pairs: Tuple[Tuple[int, int], ...] = field(init=False)
    eval_pairs: Tuple[Tuple[int, int], ...] = field(init=False)

    def __post_init__(self) -> None:
        pairs = [(a, b) for a in range(10) for b in range(10) if a + b <= 9]
        rng = random.Random(self.seed)
        rng.shuffle(pairs)
        cut = max(1, int(len(pairs) * self.holdout_fraction))
        self.eval_pairs = tuple(pairs[:cut])
        self.train_pairs = tuple(pairs[cut:])

    @staticmethod
    def prompt(pair: Tuple[int, int], mode: ReasoningMode = ReasoningMode.DIRECT) -> Tuple[str, ...]:
        a, b = pair
        base = (str(a), "+", str(b), "=")
        if mode is ReasoningMode.DIRECT:
            return base
        return base + (BASE_MARKER,)

    @staticmethod
    def direct_target(pair: Tuple[int, int]) -> Tuple[str, ...]:
        a, b = pair
        return (str(a + b), EOS)

    @staticmethod
    def reasoning_target(pair: Tuple[int, int]) -> Tuple[str, ...]:
        a, b = pair
        r = str(a + b)
        return (THINK_OPEN, "a", str(a), str(b), "b", r, THINK_CLOSE, r, EOS)

    def source(self, pair: Tuple[int, int], p: int) -> HybridSource:
        if p == 1:
            return HybridSource(self.prompt(pair, ReasoningMode.MAX), self.reasoning_target(pair), 1)
        return HybridSource(self.prompt(pair), self.direct_target(pair), 0)

    def sample_batch(self, n: int, rng: random.Random) -> List[HybridSource]:
        return [
            self.source(rng.choice(self.train_pairs), rng.randint(0, 1))
            for _ in range(n)
        ]

    @staticmethod
    def correct_answer(pair: Tuple[int, int]) -> str:
        return str(pair[0] + pair[1])


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(t for t in tokens if t != EOS)


def _next_context(policy: ToyPolicy, prompt: Sequence[str], emitted: Sequence[str]) -> tuple:
    seq = (PAD,) * policy.order + tuple(prompt) + tuple(emitted)
    return tuple(seq[-policy.order:])


def greedy_decode(policy: ToyPolicy, prompt: Sequence[str], max_len: int = 16) -> List[str]:
    policy.check_tokens(prompt)
    out: List[str] = []
    while len(out) < max_len:
        z = policy.logits(_next_context(policy, prompt, out))
        tok = policy.vocab[int(np.argmax(z))]
        out.append(tok)
        if tok == EOS:
            break
    return out


def sample_sequence(
    policy: ToyPolicy,
    prompt: Sequence[str],
    rng: np.random.Generator,
    max_len: int = 16,
    temperature: float = 1.0,
):
    """Temperature sampling; returns (tokens, steps) where each step is
    (context, token index, log-probability under the sampling policy)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    policy.check_tokens(prompt)
    out: List[str] = []
    steps: List[Tuple[tuple, int, float]] = []
    while len(out) < max_len:
        ctx = _next_context(policy, prompt, out)
        lsm = log_softmax(policy.logits(ctx) / temperature)
        probs = np.exp(lsm)
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        idx = min(idx, policy.size - 1)
        steps.append((ctx, idx, float(lsm[idx])))
        tok = policy.vocab[idx]
        out.append(tok)
        if tok == EOS:
            break
    return out, steps


def output_matches_mode(tokens: Sequence[str], mode: ReasoningMode) -> bool:
    """Structural validity of a decoded output for its prompt mode.

    Requires parseable delimiter structure, think-block presence matching the
    mode, and a non-empty answer segment.
    """
    text = detokenize(tokens)
    if not text.strip():
        return False
    try:
        parsed = parse_response(text)
    except MarkerError:
        return False
    if not validate(parsed, mode):
        return False
    return bool(parsed.answer.strip())


def mode_conditioning_eval(
    policy: ToyPolicy, task: ToyTask, n_prompts: int, seed: int = 0
) -> float:
    """Fraction of greedy decodes whose think-block presence matches the
    prompt's mode, over n_prompts held-out prompts decoded in both direct
    and reasoning form (2 * n_prompts outputs)."""
    if n_prompts < 1:
        raise ValueError("n_prompts must be >= 1")
    rng = random.Random(seed)
    matches = 0
    for _ in range(n_prompts):
        pair = rng.choice(task.eval_pairs)
        for mode in (ReasoningMode.DIRECT, ReasoningMode.MAX):
            out = greedy_decode(policy, task.prompt(pair, mode))
            matches += output_matches_mode(out, mode)
    return matches / (2 * n_prompts)


# Reward checkers stand in for a trained reward model: they supply the
# correct-label probability; structural validity comes from the marker
# grammar.
RewardFn = Callable[[ToyTask, Tuple[int, int], Sequence[str], ReasoningMode], float]


def validity_reward(task: ToyTask, pair, tokens, mode) -> float:
    """Correctness always granted; the binary reward reduces to validity."""
    return 1.0


def correctness_reward(task: ToyTask, pair, tokens, mode) -> float:
    """1.0 when the answer segment starts with the true sum."""
    text = detokenize(tokens)
    if not text.strip():
        return 0.0
    try:
        parsed = parse_response(text)
    except MarkerError:
        return 0.0
    answer_tokens = parsed.answer.split()
    return 1.0 if answer_tokens[:1] == [task.correct_answer(pair)] else 0.0


def ppo_train(
    policy: ToyPolicy,
    task: ToyTask,
    reward_fn: RewardFn,
    epochs: int,
    clip_epsilon: float,
    seed: int,
    n_rollouts: int = 256,
    learning_rate: float = 400.0,
    max_len: int = 16,
    baseline_decay: float = 0.9,
    rollout_mode: ReasoningMode = ReasoningMode.MAX,
) -> List[float]:
    """Clipped-surrogate training with the binary reward; returns the mean
    reward per epoch (measured on that epoch's rollouts, before the update).

    Each epoch samples fresh rollouts from the current policy (the old-policy
    snapshot, so ratios start at 1), computes terminal binary rewards,
    broadcasts advantage = reward - EMA baseline to every token, and ascends
    the clipped surrogate with one gradient step. A ratio overflow rejects
    the epoch's update instead of crashing. Deterministic for a fixed seed.
    """
    if not 0.0 < clip_epsilon < 1.0:
        raise ValueError("clip_epsilon must lie in (0, 1)")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    rng = np.random.default_rng(seed)
    baseline = 0.0
    curve: List[float] = []
    for _ in range(epochs):
        rollouts = []
        for _ in range(n_rollouts):
            pair = task.train_pairs[int(rng.integers(len(task.train_pairs)))]
            prompt = task.prompt(pair, rollout_mode)
            tokens, steps = sample_sequence(policy, prompt, rng, max_len=max_len)
            valid = output_matches_mode(tokens, rollout_mode)
            correct_prob = min(max(reward_fn(task, pair, tokens, rollout_mode), 0.0), 1.0)
            r = reward(RewardInput(correct_prob=correct_prob, valid=valid))
            rollouts.append((steps, float(r)))
        mean_reward = sum(r for _, r in rollouts) / n_rollouts
        curve.append(mean_reward)

        total_steps = sum(len(steps) for steps, _ in rollouts)
        ppo_steps = []
        grads: dict = {}
        try:
            for steps, r in rollouts:
                advantage = r - baseline
                for ctx, idx, old_lp in steps:
                    lsm = log_softmax(policy.logits(ctx))
                    new_lp = float(lsm[idx])
                    ppo_steps.append(
                        PPOStep(old_logprob=old_lp, new_logprob=new_lp,
                                advantage=advantage, epsilon=clip_epsilon)
                    )
                    if advantage == 0.0:
                        continue
                    ratio = float(np.exp(new_lp - old_lp))
                    clipped = min(max(ratio, 1.0 - clip_epsilon), 1.0 + clip_epsilon)
                    if ratio * advantage > clipped * advantage:
                        continue  # clipped flat region: no gradient
                    g = grads.get(ctx)
                    if g is None:
                        g = np.zeros(policy.size)
                        grads[ctx] = g
                    factor = advantage * ratio
                    g -= factor * np.exp(lsm)
                    g[idx] += factor
            ppo_objective(ppo_steps)  # surfaces RatioOverflow for rejection
        except RatioOverflow:
            baseline = baseline_decay * baseline + (1 - baseline_decay) * mean_reward
            continue
        if learning_rate > 0 and grads:
            for ctx, g in grads.items():
                policy.row(ctx)[:] += learning_rate * (g / total_steps)
        baseline = baseline_decay * baseline + (1 - baseline_decay) * mean_reward
    return curve
