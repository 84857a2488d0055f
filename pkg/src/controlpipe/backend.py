"""Pluggable text-generation backends.

HTTPBackend speaks the common chat-completions JSON shape
(POST {base}/chat/completions) with retry/backoff on transient failures.
StubBackend serves canned responses keyed by a hash of the full message
list and can replay recorded request/response cassettes, so pipeline tests
are deterministic and offline. ScriptedStub goes one step further and
fabricates plausible pipeline responses (marker-aware generation, judge
scores, condensation JSON) from the request text alone.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import requests

from .errors import ControlPipeError

RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class BackendError(ControlPipeError):
    """Base class for generation transport failures."""


class BackendUnavailable(BackendError):
    """Retries exhausted against a transient failure."""


class BackendRejected(BackendError):
    """Non-retryable client error (4xx other than 429)."""

    def __init__(self, status: int, body: str):
        super().__init__(f"backend rejected request: HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body[:200]


class StubMiss(BackendError):
    """Stub backend has no canned response for a request."""


@dataclass(frozen=True)
class GenRequest:
    """One chat-style generation request."""

    user: str
    system: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("user message must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def messages(self) -> list:
        msgs = []
        if self.system is not None:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.user})
        return msgs


@dataclass(frozen=True)
class GenResult:
    """Generated text plus usage accounting and backend identity."""

    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    backend: str = ""
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for HTTPBackend. API keys come only from the
    named environment variable, never from files."""

    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = "CONTROLPIPE_API_KEY"
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def request_key(req: GenRequest) -> str:
    """Stable hash of the full message list; canned-response lookup key."""
    blob = json.dumps(req.messages(), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class HTTPBackend:
    """Chat-completions client with exponential backoff and jitter."""

    def __init__(self, cfg: BackendConfig, api_key: Optional[str] = None):
        self.cfg = cfg
        if api_key is None:
            import os

            api_key = os.environ.get(cfg.api_key_env, "")
        self._api_key = api_key
        self._session = requests.Session()

    @property
    def name(self) -> str:
        return f"http:{self.cfg.model}"

    def generate(self, req: GenRequest) -> GenResult:
        url = self.cfg.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": self.cfg.model,
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        last_error = "no attempt made"
        attempts = self.cfg.max_retries + 1
        for attempt in range(attempts):
            try:
                resp = self._session.post(
                    url, json=payload, headers=headers, timeout=self.cfg.timeout
                )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp, retries=attempt)
                if resp.status_code in RETRYABLE_STATUS:
                    last_error = f"HTTP {resp.status_code}"
                elif 400 <= resp.status_code < 500:
                    raise BackendRejected(resp.status_code, resp.text)
                else:
                    last_error = f"HTTP {resp.status_code}"
            if attempt < attempts - 1:
                backoff = self.cfg.backoff_base * (2 ** attempt)
                time.sleep(backoff + random.uniform(0, backoff * 0.25))
        raise BackendUnavailable(f"retries exhausted after {attempts} attempts: {last_error}")

    def _parse(self, resp: "requests.Response", retries: int) -> GenResult:
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion body: {exc}") from exc
        usage = body.get("usage") or {}
        return GenResult(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            backend=self.name,
            meta={"retries": str(retries)},
        )


class StubBackend:
    """Deterministic offline backend for tests.

    Responses are looked up by request_key() in, order: the canned map, the
    loaded cassette, then the fallback callable. Identical requests always
    produce identical results.
    """

    def __init__(
        self,
        canned: Optional[dict] = None,
        cassette: Optional[Union[str, Path]] = None,
        fallback: Optional[Callable[[GenRequest], str]] = None,
        name: str = "stub",
    ):
        self._canned = dict(canned or {})
        self._fallback = fallback
        self._name = name
        if cassette is not None:
            self.load_cassette(cassette)

    @property
    def name(self) -> str:
        return self._name

    def add(self, req_or_user: Union[GenRequest, str], text: str) -> None:
        req = req_or_user if isinstance(req_or_user, GenRequest) else GenRequest(user=req_or_user)
        self._canned[request_key(req)] = text

    def load_cassette(self, path: Union[str, Path]) -> int:
        """Load {"request": {...}, "response": {"text": ...}} rows; returns count."""
        count = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            req = GenRequest(**row["request"])
            self._canned[request_key(req)] = row["response"]["text"]
            count += 1
        return count

    @staticmethod
    def record(path: Union[str, Path], req: GenRequest, result: GenResult) -> None:
        """Append one exchange to a cassette file."""
        row = {
            "request": {
                "user": req.user,
                "system": req.system,
                "temperature": req.temperature,
                "max_tokens": req.max_tokens,
                "seed": req.seed,
            },
            "response": {"text": result.text},
        }
        with Path(path).open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    def generate(self, req: GenRequest) -> GenResult:
        key = request_key(req)
        if key in self._canned:
            text = self._canned[key]
        elif self._fallback is not None:
            text = self._fallback(req)
        else:
            raise StubMiss(f"no canned response for request {key[:12]}... ({req.user[:60]!r})")
        return GenResult(
            text=text,
            prompt_tokens=len(req.user.split()),
            completion_tokens=len(text.split()),
            backend=self._name,
            meta={"retries": "0"},
        )


_WORD_POOL = (
    "patient symptom dosage trial clinical evidence outcome therapy lesion biopsy "
    "diagnosis relapse cohort onset chronic acute renal cardiac hepatic neural "
    "baseline marker titer plasma serum antigen vector allele enzyme receptor "
    "protocol triage consent imaging contrast stenosis embolism sepsis remission"
).split()

_CONDENSE_CUE = "reduce the length to within"
_VERIFY_CUE = "evaluate how well the response matches the preferred answer"
_QUESTION_CUE = "write one self-contained question"


class ScriptedStub:
    """Offline backend that fabricates deterministic, schema-correct
    responses by inspecting the request text.

    Judge requests get an integer score, condensation requests get a JSON
    object whose reasoning fits the requested word budget, question-writing
    requests get a question, and everything else gets an answer that honors
    any reasoning markers present in the prompt. Content is derived from a
    hash of the prompt, so identical requests give identical responses.
    """

    def __init__(self, name: str = "scripted-stub", max_reasoning_words: int = 900):
        self._name = name
        self._max_words = max_reasoning_words

    @property
    def name(self) -> str:
        return self._name

    def generate(self, req: GenRequest) -> GenResult:
        text = self._respond(req.user)
        return GenResult(
            text=text,
            prompt_tokens=len(req.user.split()),
            completion_tokens=len(text.split()),
            backend=self._name,
            meta={"retries": "0"},
        )

    def _respond(self, prompt: str) -> str:
        low = prompt.lower()
        if _VERIFY_CUE in low:
            return str(self._seed_of(prompt) % 11)
        if _CONDENSE_CUE in low:
            return self._condense(prompt)
        if _QUESTION_CUE in low:
            return self._question(prompt)
        return self._answer(prompt)

    @staticmethod
    def _seed_of(prompt: str) -> int:
        return int(hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12], 16)

    def _words(self, prompt: str, count: int) -> str:
        rng = random.Random(self._seed_of(prompt))
        return " ".join(rng.choice(_WORD_POOL) for _ in range(count))

    def _condense(self, prompt: str) -> str:
        budget_match = re.search(r"within\s+(\d+)\s+words", prompt)
        budget = int(budget_match.group(1)) if budget_match else 50
        source_match = re.search(r"# Reasoning\n(.*?)\n-----", prompt, re.DOTALL)
        source_words = (source_match.group(1).split() if source_match else [])
        keep = max(1, min(len(source_words), int(budget * 0.8)))
        condensed = " ".join(source_words[:keep]) if source_words else self._words(prompt, keep)
        return json.dumps({"Reasoning": condensed}, ensure_ascii=False)

    def _question(self, prompt: str) -> str:
        return f"What does finding f{self._seed_of(prompt) % 97} imply for management?"

    def _answer(self, prompt: str) -> str:
        seed = self._seed_of(prompt)
        letter = "ABCDE"[seed % 5]
        answer = (
            f"{self._words(prompt + '#a', 30)}. "
            f"Final Answer: \\boxed{{{letter}}}"
        )
        if "/think" not in prompt:
            return answer
        if "/short" in prompt:
            n = 40
        elif "/medium" in prompt:
            n = 120
        elif "/long" in prompt:
            n = 560
        else:
            n = self._max_words
        reasoning = self._words(prompt + "#r", n)
        return f"<think>{reasoning}</think> {answer}"


Backend = Union[HTTPBackend, StubBackend, ScriptedStub]


class _InstrumentedBackend:
    """Wraps a backend to observe peak concurrency (test support)."""

    def __init__(self, inner, delay: float = 0.0):
        self._inner = inner
        self._delay = delay
        self._lock = threading.Lock()
        self._active = 0
        self.peak = 0

    @property
    def name(self) -> str:
        return self._inner.name

    def generate(self, req: GenRequest) -> GenResult:
        with self._lock:
            self._active += 1
            self.peak = max(self.peak, self._active)
        try:
            if self._delay:
                time.sleep(self._delay)
            return self._inner.generate(req)
        finally:
            with self._lock:
                self._active -= 1


def generate_batch(
    backend, reqs: Sequence[GenRequest], max_in_flight: int = 4
) -> List[Union[GenResult, BackendError]]:
    """Run requests with bounded concurrency; output index i corresponds to
    input i. Per-item failures are embedded in the aligned output instead of
    aborting the batch."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be >= 1")
    if not reqs:
        return []
    results: List[Union[GenResult, BackendError]] = [None] * len(reqs)  # type: ignore[list-item]

    def run(i: int) -> None:
        try:
            results[i] = backend.generate(reqs[i])
        except BackendError as exc:
            results[i] = exc

    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        list(pool.map(run, range(len(reqs))))
    return results
