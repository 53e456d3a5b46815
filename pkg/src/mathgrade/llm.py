"""Prompted LLM grading: prompt templates, chat-completion transport,
record/replay cache, verdict parsing and latency capture."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import re
import statistics
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional

from .normalizer import GradingVerdict, Label

log = logging.getLogger(__name__)

PROMPT_VERSION = "v1"
DEFAULT_MODEL = "gpt-4o"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_CREDENTIAL_ENV = "OPENAI_API_KEY"
DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2


class Strategy(str, enum.Enum):
    ZERO_SHOT = "zero_shot"
    FEW_SHOT = "few_shot"
    CHAIN_OF_THOUGHT = "chain_of_thought"


class CacheMode(str, enum.Enum):
    LIVE = "live"
    RECORD = "record"
    REPLAY = "replay"


class LlmError(Exception):
    """Base class for failures of the LLM grading path."""


class UnparseableVerdict(LlmError):
    def __init__(self, completion: str):
        super().__init__(f"no verdict found in completion: {completion[:80]!r}")
        self.completion = completion


class TransportError(LlmError):
    pass


class CacheMiss(LlmError):
    def __init__(self, fingerprint: str):
        super().__init__(f"no recorded completion for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


# --- prompts ---------------------------------------------------------------

_SLOT_RE = re.compile(r"\{(question|expected_answer|student_message|student_answer)\}")


@lru_cache(maxsize=None)
def load_template(strategy: Strategy, version: str = PROMPT_VERSION) -> str:
    strategy = Strategy(strategy)
    path = resources.files("mathgrade").joinpath(f"prompts/{version}/{strategy.value}.txt")
    return path.read_text("utf-8").rstrip("\n")


def build_prompt(strategy, question: str, expected_answer: str, student_response: str,
                 version: str = PROMPT_VERSION) -> str:
    """Fill a strategy's template; slot values are inserted verbatim."""
    values = {
        "question": question,
        "expected_answer": expected_answer,
        "student_message": student_response,
        "student_answer": student_response,
    }
    # single pass, so braces inside slot values are never re-expanded
    return _SLOT_RE.sub(lambda m: values[m.group(1)], load_template(Strategy(strategy), version))


@dataclass(frozen=True)
class PromptRequest:
    """Everything that is allowed to reach the model. Nothing else is sent."""

    strategy: Strategy
    question: str
    expected_answer: str
    student_response: str
    model_name: str = DEFAULT_MODEL
    temperature: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.temperature != 0:
            raise ValueError("grading requests are issued at temperature 0")

    @classmethod
    def for_attempt(cls, strategy, attempt, model_name: str = DEFAULT_MODEL) -> "PromptRequest":
        return cls(strategy, attempt.question_text, attempt.expected_answer,
                   attempt.student_response, model_name)

    @property
    def prompt(self) -> str:
        return build_prompt(self.strategy, self.question, self.expected_answer, self.student_response)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.strategy, self.prompt, self.model_name)


def fingerprint(strategy, prompt: str, model_name: str) -> str:
    payload = "\x1f".join([Strategy(strategy).value, model_name, prompt])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def render_prompt_docs(version: str = PROMPT_VERSION) -> str:
    """Markdown page showing every shipped template."""
    out = [f"# Grading prompts ({version})", "",
           "Generated by `mathgrade.llm.render_prompt_docs`; do not edit by hand.", ""]
    for strategy in Strategy:
        out += [f"## {strategy.value}", "", "```text", load_template(strategy, version), "```", ""]
    return "\n".join(out)


# --- verdict parsing -------------------------------------------------------

_LEADING_WORD = re.compile(r"^[\s\"'*`]*([A-Za-z]+)")
_COT_LABEL = re.compile(r"correct_answer|wrong_answer")
_ANSWER_MARKER = re.compile(r"answer\s*:", re.IGNORECASE)
_TRAILING_MARKER = re.compile(r"answer\s*:\s*$", re.IGNORECASE)
_LEADING_REASONING = re.compile(r"^\s*reasoning\s*:\s*", re.IGNORECASE)


def parse_binary_verdict(completion: str, strategy: str = "llm") -> GradingVerdict:
    """Map a bare yes/no completion to a verdict.

    Only the first word counts; case and surrounding punctuation are
    ignored. Raises :class:`UnparseableVerdict` for anything else.
    """
    m = _LEADING_WORD.match(completion)
    word = m.group(1).casefold() if m else ""
    if word == "yes":
        return GradingVerdict(Label.CORRECT, strategy)
    if word == "no":
        return GradingVerdict(Label.WRONG, strategy)
    raise UnparseableVerdict(completion)


def parse_cot_verdict(completion: str, strategy: str = "llm_cot") -> GradingVerdict:
    markers = list(_ANSWER_MARKER.finditer(completion))
    hit = None
    if markers:
        hits = list(_COT_LABEL.finditer(completion, markers[-1].end()))
        hit = hits[-1] if hits else None
    if hit is None:
        hits = list(_COT_LABEL.finditer(completion))
        hit = hits[-1] if hits else None
    if hit is None:
        raise UnparseableVerdict(completion)
    rationale = _TRAILING_MARKER.sub("", completion[:hit.start()].rstrip()).strip()
    rationale = _LEADING_REASONING.sub("", rationale)
    return GradingVerdict(Label(hit.group(0)), strategy, rationale=rationale)


# --- transport -------------------------------------------------------------


class ChatCompletionClient:
    """Minimal client for an OpenAI-style ``/chat/completions`` endpoint."""

    def __init__(self, endpoint: str = DEFAULT_ENDPOINT, *, api_key: Optional[str] = None,
                 credential_env: str = DEFAULT_CREDENTIAL_ENV, timeout: float = DEFAULT_TIMEOUT,
                 retries: int = DEFAULT_RETRIES, backoff: float = 1.0,
                 max_in_flight: int = 8, transport=None,
                 sleep: Callable[[float], None] = time.sleep):
        import httpx

        self.endpoint = endpoint
        self._api_key = api_key if api_key is not None else os.environ.get(credential_env)
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self._httpx = httpx

    def __repr__(self):
        return f"ChatCompletionClient({self.endpoint!r})"

    def complete(self, prompt: str, model: str, temperature: float = 0.0) -> str:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        body = {"model": model, "temperature": temperature,
                "messages": [{"role": "user", "content": prompt}]}
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._gate:
                    resp = self._http.post(self.endpoint, json=body, headers=headers)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_exc = TransportError(f"HTTP {resp.status_code}")
                    continue
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except self._httpx.TransportError as exc:  # includes timeouts
                last_exc = exc
            except self._httpx.HTTPStatusError as exc:
                raise TransportError(f"HTTP {exc.response.status_code}") from exc
            except (KeyError, IndexError, ValueError) as exc:
                raise TransportError(f"malformed completion response: {exc}") from exc
            log.warning("completion request failed (attempt %d): %s", attempt + 1, last_exc)
        raise TransportError(f"gave up after {self.retries + 1} attempts: {last_exc}")


# --- replay cache ----------------------------------------------------------


@dataclass(frozen=True)
class CacheEntry:
    fingerprint: str
    strategy: str
    prompt: str
    completion: str
    recorded_latency: float


class ReplayCache:
    """Recorded completions keyed by request fingerprint, backed by JSON lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, CacheEntry] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = CacheEntry(**json.loads(line))
                        self._entries[entry.fingerprint] = entry

    def __len__(self):
        return len(self._entries)

    def __contains__(self, fp: str):
        return fp in self._entries

    def get(self, fp: str) -> CacheEntry:
        try:
            return self._entries[fp]
        except KeyError:
            raise CacheMiss(fp) from None

    def put(self, entry: CacheEntry) -> None:
        with self._lock:
            self._entries[entry.fingerprint] = entry
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.__dict__, ensure_ascii=False) + "\n")

    def entries(self) -> list:
        return list(self._entries.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for fp in sorted(self._entries):
            h.update(fp.encode())
            h.update(self._entries[fp].completion.encode("utf-8"))
        return h.hexdigest()


class Completer:
    """Routes prompt requests to a live client, a cache, or both."""

    def __init__(self, mode=CacheMode.LIVE, client=None, cache: Optional[ReplayCache] = None,
                 model_name: str = DEFAULT_MODEL):
        self.mode = CacheMode(mode)
        if self.mode is CacheMode.REPLAY and cache is None:
            raise ValueError("replay mode needs a cache")
        if self.mode is not CacheMode.REPLAY and client is None:
            raise ValueError(f"{self.mode.value} mode needs a client")
        if self.mode is CacheMode.RECORD and cache is None:
            cache = ReplayCache()
        self.client = client
        self.cache = cache
        self.model_name = model_name

    def complete(self, request: PromptRequest) -> tuple:
        """Return ``(completion, latency_seconds)``."""
        prompt = request.prompt
        fp = fingerprint(request.strategy, prompt, request.model_name)
        if self.mode is CacheMode.REPLAY:
            entry = self.cache.get(fp)
            return entry.completion, entry.recorded_latency
        t0 = time.perf_counter()
        text = self.client.complete(prompt, request.model_name, request.temperature)
        latency = time.perf_counter() - t0
        if self.mode is CacheMode.RECORD:
            self.cache.put(CacheEntry(fp, request.strategy.value, prompt, text, latency))
        return text, latency


# --- grading ---------------------------------------------------------------

STRATEGY_IDS = {
    Strategy.ZERO_SHOT: "llm_zero_shot",
    Strategy.FEW_SHOT: "llm_few_shot",
    Strategy.CHAIN_OF_THOUGHT: "llm_cot",
}


@dataclass(frozen=True)
class LlmOutcome:
    verdict: GradingVerdict
    raw_completion: str
    latency: float
    attempt_count: int
    strategy: Strategy


def _parse(strategy: Strategy, completion: str) -> GradingVerdict:
    sid = STRATEGY_IDS[strategy]
    if strategy is Strategy.CHAIN_OF_THOUGHT:
        return parse_cot_verdict(completion, sid)
    return parse_binary_verdict(completion, sid)


def grade_llm(strategy, attempt, completer: Completer, model_name: Optional[str] = None) -> LlmOutcome:
    """Grade one attempt with a prompted model.

    An unparseable completion is retried once; if the retry is also
    unparseable the attempt is recorded as wrong with ``parse_failed`` set.
    """
    strategy = Strategy(strategy)
    request = PromptRequest.for_attempt(strategy, attempt, model_name or completer.model_name)
    total_latency = 0.0
    completion = ""
    for attempt_count in (1, 2):
        completion, latency = completer.complete(request)
        total_latency += latency
        try:
            verdict = _parse(strategy, completion)
        except UnparseableVerdict:
            continue
        verdict = GradingVerdict(verdict.label, verdict.strategy, verdict.rationale, latency)
        return LlmOutcome(verdict, completion, latency, attempt_count, strategy)
    verdict = GradingVerdict(Label.WRONG, STRATEGY_IDS[strategy], rationale=None,
                             latency=total_latency, parse_failed=True)
    return LlmOutcome(verdict, completion, total_latency, 2, strategy)


def latency_report(outcomes: Iterable) -> dict:
    """Mean and max latency per strategy.

    Accepts :class:`LlmOutcome` objects or ``(strategy_name, seconds)`` pairs.
    """
    groups: dict[str, list] = {}
    for item in outcomes:
        if isinstance(item, LlmOutcome):
            key, value = item.strategy.value, item.latency
        else:
            key, value = item
            key = getattr(key, "value", key)
        if value is None:
            continue
        groups.setdefault(key, []).append(float(value))
    return {k: {"mean": statistics.fmean(v), "max": max(v), "n": len(v)}
            for k, v in groups.items() if v}


def cache_from_mapping(completions: Mapping[str, str]) -> ReplayCache:
    """In-memory cache from ``{fingerprint: completion}`` (handy in tests)."""
    cache = ReplayCache()
    for fp, text in completions.items():
        cache.put(CacheEntry(fp, "", "", text, 0.0))
    return cache
