"""One interface over every grading approach, plus the rule-then-LLM cascade."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from . import llm
from .dataset import AttemptRecord, write_attempts
from .normalizer import GradingVerdict, Label, naive_match, text_process_grade

log = logging.getLogger(__name__)


class GradingStrategyId(str, enum.Enum):
    NAIVE_STRING = "naive_string"
    TEXT_PROCESSING = "text_processing"
    LLM_ZERO_SHOT = "llm_zero_shot"
    LLM_FEW_SHOT = "llm_few_shot"
    LLM_COT = "llm_cot"
    CASCADE_TEXT_ZERO_SHOT = "cascade_text_zero_shot"

    @property
    def needs_llm(self) -> bool:
        return self not in (GradingStrategyId.NAIVE_STRING, GradingStrategyId.TEXT_PROCESSING)


_LLM_STRATEGY = {
    GradingStrategyId.LLM_ZERO_SHOT: llm.Strategy.ZERO_SHOT,
    GradingStrategyId.LLM_FEW_SHOT: llm.Strategy.FEW_SHOT,
    GradingStrategyId.LLM_COT: llm.Strategy.CHAIN_OF_THOUGHT,
}


@dataclass(frozen=True)
class GradedAttempt:
    attempt: AttemptRecord
    strategy: GradingStrategyId
    verdict: GradingVerdict
    stage_trace: tuple = ()
    error: Optional[str] = None

    @property
    def label(self) -> Label:
        return self.verdict.label

    @property
    def error_flag(self) -> bool:
        return self.error is not None or self.verdict.parse_failed


def _rule_stage(strategy: GradingStrategyId, attempt: AttemptRecord) -> GradingVerdict:
    if strategy is GradingStrategyId.NAIVE_STRING:
        return naive_match(attempt.expected_answer, attempt.student_response)
    return text_process_grade(attempt.question_text, attempt.expected_answer, attempt.student_response)


def _llm_stage(strategy: llm.Strategy, attempt: AttemptRecord, completer) -> GradingVerdict:
    if completer is None:
        raise ValueError("LLM-backed strategies need a completer (live client or replay cache)")
    return llm.grade_llm(strategy, attempt, completer).verdict


def grade(strategy_id, attempt: AttemptRecord, completer: Optional[llm.Completer] = None,
          *, cascade_llm: llm.Strategy = llm.Strategy.ZERO_SHOT) -> GradedAttempt:
    strategy_id = GradingStrategyId(strategy_id)
    if strategy_id is GradingStrategyId.CASCADE_TEXT_ZERO_SHOT:
        return cascade_grade(attempt, completer, llm_strategy=cascade_llm)
    if strategy_id in _LLM_STRATEGY:
        verdict = _llm_stage(_LLM_STRATEGY[strategy_id], attempt, completer)
    else:
        verdict = _rule_stage(strategy_id, attempt)
    return GradedAttempt(attempt, strategy_id, verdict)


def cascade_grade(attempt: AttemptRecord, completer: Optional[llm.Completer] = None,
                  *, llm_strategy: llm.Strategy = llm.Strategy.ZERO_SHOT) -> GradedAttempt:
    """Naive match, then text processing, then one LLM prompt.

    Stops at the first stage that accepts the answer; the LLM is only
    contacted when both rule stages reject it.
    """
    trace = []
    verdict = None
    for stage in (GradingStrategyId.NAIVE_STRING, GradingStrategyId.TEXT_PROCESSING):
        verdict = _rule_stage(stage, attempt)
        trace.append((stage.value, verdict.label.value))
        if verdict.is_correct:
            break
    else:
        verdict = _llm_stage(llm_strategy, attempt, completer)
        trace.append((llm.STRATEGY_IDS[llm.Strategy(llm_strategy)], verdict.label.value))
    final = GradingVerdict(verdict.label, GradingStrategyId.CASCADE_TEXT_ZERO_SHOT.value,
                           verdict.rationale, verdict.latency, verdict.parse_failed)
    return GradedAttempt(attempt, GradingStrategyId.CASCADE_TEXT_ZERO_SHOT, final, tuple(trace))


@dataclass
class BatchResult:
    graded: list
    error_count: int = 0
    errors: list = field(default_factory=list)  # (index, message)

    def __iter__(self):
        return iter(self.graded)

    def __len__(self):
        return len(self.graded)


def batch_grade(strategy_id, attempts: Sequence[AttemptRecord], completer=None, parallelism: int = 1,
                *, progress: Optional[Callable[[int, int], None]] = None,
                cascade_llm: llm.Strategy = llm.Strategy.ZERO_SHOT) -> BatchResult:
    """Grade every attempt once, keeping input order.

    An LLM failure on one attempt becomes a wrong verdict carrying an error
    message; the batch keeps going.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    strategy_id = GradingStrategyId(strategy_id)
    total = len(attempts)
    done = 0

    def one(attempt):
        try:
            return grade(strategy_id, attempt, completer, cascade_llm=cascade_llm)
        except llm.LlmError as exc:
            verdict = GradingVerdict(Label.WRONG, strategy_id.value, rationale=None)
            return GradedAttempt(attempt, strategy_id, verdict, error=f"{type(exc).__name__}: {exc}")

    graded = []
    if parallelism == 1 or not strategy_id.needs_llm:
        for attempt in attempts:
            graded.append(one(attempt))
            done += 1
            if progress:
                progress(done, total)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for result in pool.map(one, attempts):
                graded.append(result)
                done += 1
                if progress:
                    progress(done, total)
    errors = [(i, g.error) for i, g in enumerate(graded) if g.error is not None]
    if errors:
        log.warning("%d of %d attempts failed to grade", len(errors), total)
    return BatchResult(graded, len(errors), errors)


GRADED_COLUMNS = ("strategy", "predicted_grade", "stage_trace", "rationale", "latency_s", "error_flag")


def graded_row(g: GradedAttempt) -> dict:
    return {
        "strategy": g.strategy.value,
        "predicted_grade": g.label.value,
        "stage_trace": ";".join(f"{s}:{lab}" for s, lab in g.stage_trace),
        "rationale": g.verdict.rationale or "",
        "latency_s": "" if g.verdict.latency is None else f"{g.verdict.latency:.6f}",
        "error_flag": "1" if g.error_flag else "0",
    }


def write_graded(path, graded: Sequence[GradedAttempt]) -> None:
    write_attempts(path, [g.attempt for g in graded], [graded_row(g) for g in graded], GRADED_COLUMNS)
