"""Bayesian Knowledge Tracing over first-attempt sequences, mastery
classification under different grading sources, and simple
threshold-based mastery rollups."""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

from . import _kernels
from .dataset import AttemptRecord, Grade3, group_first_attempts
from .normalizer import Label, naive_match, text_process_grade

DEFAULT_THRESHOLD = 0.9
LESSON_QUESTIONS = 10


@dataclass(frozen=True)
class BktParams:
    p_l0: float
    p_t: float
    p_s: float
    p_g: float
    check_identifiable: bool = field(default=True, compare=False)

    def __post_init__(self):
        for name in ("p_l0", "p_t", "p_s", "p_g"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
        if self.check_identifiable and self.p_s + self.p_g >= 1.0:
            raise ValueError(f"p_s + p_g must be < 1 (got {self.p_s + self.p_g})")

    def to_dict(self) -> dict:
        return {"p_l0": self.p_l0, "p_t": self.p_t, "p_s": self.p_s, "p_g": self.p_g}

    @classmethod
    def from_dict(cls, data: Mapping) -> "BktParams":
        return cls(float(data["p_l0"]), float(data["p_t"]), float(data["p_s"]), float(data["p_g"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BktParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_params() -> BktParams:
    return BktParams(p_l0=0.4, p_t=0.05, p_s=0.299, p_g=0.299)


def bkt_step(p_know: float, observed_correct: bool, params: BktParams) -> float:
    """One observation: Bayesian posterior, then the learning transition."""
    if observed_correct:
        num = p_know * (1.0 - params.p_s)
        den = num + (1.0 - p_know) * params.p_g
    else:
        num = p_know * params.p_s
        den = num + (1.0 - p_know) * (1.0 - params.p_g)
    posterior = num / den
    return posterior + (1.0 - posterior) * params.p_t


def bkt_trace(observations: Sequence[bool], params: BktParams) -> list:
    """Knowledge estimates after each observation, starting from ``p_l0``."""
    if len(observations) == 0:
        raise ValueError("cannot trace an empty observation sequence")
    out = []
    p = params.p_l0
    for obs in observations:
        p = bkt_step(p, bool(obs), params)
        out.append(p)
    return out


# --- grading sources --------------------------------------------------------


@dataclass(frozen=True)
class GradingSource:
    """Names a grading and says whether it marks a record correct."""

    name: str
    judge: Callable[[AttemptRecord], bool]


def human_source() -> GradingSource:
    return GradingSource("human", lambda r: r.human_grade is Grade3.CORRECT)


def model_source() -> GradingSource:
    """The grade stored with the log; its "other" counts as not correct."""
    return GradingSource("model", lambda r: r.model_grade is Grade3.CORRECT)


def rule_source(strategy: str) -> GradingSource:
    if strategy == "naive_string":
        return GradingSource(strategy, lambda r: naive_match(r.expected_answer, r.student_response).is_correct)
    if strategy == "text_processing":
        return GradingSource(strategy, lambda r: text_process_grade(
            r.question_text, r.expected_answer, r.student_response).is_correct)
    raise ValueError(f"not a rule-based strategy: {strategy!r}")


def labels_source(name: str, labels: Mapping) -> GradingSource:
    """Source backed by precomputed labels keyed by record.

    Values may be :class:`Label`, bool, or the label strings.
    """
    def judge(rec):
        value = labels[rec]
        if isinstance(value, str):
            return Label(value) is Label.CORRECT
        return bool(value)
    return GradingSource(name, judge)


def resolve_source(source: Union[str, GradingSource]) -> GradingSource:
    if isinstance(source, GradingSource):
        return source
    if source == "human":
        return human_source()
    if source == "model":
        return model_source()
    return rule_source(source)


# --- mastery ----------------------------------------------------------------


@dataclass(frozen=True)
class BktTrace:
    user_id: str
    lesson_id: str
    grading_source: str
    observations: tuple
    knowledge_probabilities: tuple

    @property
    def final_score(self) -> float:
        return self.knowledge_probabilities[-1]

    @property
    def n_observations(self) -> int:
        return len(self.observations)


@dataclass
class MasteryReport:
    grading_source: str
    threshold: float
    traces: dict  # (user_id, lesson_id) -> BktTrace
    skipped: list = field(default_factory=list)

    def mastered(self, user_id: str, lesson_id: str) -> bool:
        return self.traces[(user_id, lesson_id)].final_score >= self.threshold

    def rows(self) -> list:
        return [
            {"user_id": t.user_id, "lesson_id": t.lesson_id, "grading_source": t.grading_source,
             "n_observations": t.n_observations, "final_score": t.final_score,
             "mastered": t.final_score >= self.threshold}
            for t in self.traces.values()
        ]

    def students(self) -> set:
        return {u for u, _ in self.traces}

    def mastered_counts(self) -> dict:
        counts: dict = {}
        for (user, _), t in self.traces.items():
            counts[user] = counts.get(user, 0) + (t.final_score >= self.threshold)
        return counts

    def lesson(self, lesson_id: str) -> dict:
        return {u: t.final_score for (u, l), t in self.traces.items() if l == lesson_id}


def mastery_report(records: Sequence[AttemptRecord], grading_source="human",
                   params: Optional[BktParams] = None, threshold: float = DEFAULT_THRESHOLD,
                   *, required_questions: Optional[int] = None,
                   groups: Optional[dict] = None) -> MasteryReport:
    """Trace every (student, lesson) first-attempt sequence under one source.

    ``required_questions`` restricts the report to lessons with exactly
    that many traced questions (strict "completed lesson" reading).
    ``groups`` lets callers reuse a precomputed :func:`group_first_attempts`.
    """
    source = resolve_source(grading_source)
    params = params or default_params()
    if groups is None:
        groups = group_first_attempts(records)
    all_pairs = {(r.user_id, r.lesson_id.raw) for r in records}
    keys, seqs = [], []
    for key, attempts in groups.items():
        if required_questions is not None and len(attempts) != required_questions:
            continue
        keys.append(key)
        seqs.append([source.judge(a) for a in attempts])
    obs, offsets = _kernels.pack(seqs)
    trace, _ = _kernels.fold(obs, offsets, params.p_l0, params.p_t, params.p_s, params.p_g)
    traces = {}
    for k, key in enumerate(keys):
        lo, hi = offsets[k], offsets[k + 1]
        traces[key] = BktTrace(key[0], key[1], source.name, tuple(seqs[k]),
                               tuple(float(x) for x in trace[lo:hi]))
    skipped = sorted(all_pairs - set(groups), key=str)
    return MasteryReport(source.name, threshold, traces, skipped)


def write_mastery_csv(path, *reports: MasteryReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["user_id", "lesson_id", "grading_source", "n_observations", "final_score", "mastered"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for report in reports:
            for row in report.rows():
                writer.writerow({**row, "final_score": f"{row['final_score']:.6f}"})


def misclassification_comparison(report_a: MasteryReport, report_b: Optional[MasteryReport],
                                 report_gold: MasteryReport) -> dict:
    """Share of students whose mastery flag differs from gold on any lesson.

    The denominator is every student with at least one traced lesson.
    """
    reports = [r for r in (report_a, report_b) if r is not None]
    gold_keys = set(report_gold.traces)
    for r in reports:
        if set(r.traces) != gold_keys:
            raise ValueError(f"report {r.grading_source!r} covers different (student, lesson) pairs than gold")
    students = sorted(report_gold.students(), key=lambda u: (not u.isdigit(), int(u) if u.isdigit() else 0, u))
    out = {"students": len(students), "gold_source": report_gold.grading_source, "sources": {}}
    for label, r in zip(("a", "b"), (report_a, report_b)):
        if r is None:
            continue
        flipped: dict = {}
        for key in report_gold.traces:
            if r.mastered(*key) != report_gold.mastered(*key):
                flipped.setdefault(key[0], []).append({
                    "lesson_id": key[1],
                    "score": r.traces[key].final_score,
                    "gold_score": report_gold.traces[key].final_score,
                    "mastered": r.mastered(*key),
                    "gold_mastered": report_gold.mastered(*key),
                })
        n_bad = len(flipped)
        out[f"fraction_students_misclassified_{label}"] = n_bad / len(students) if students else 0.0
        out["sources"][label] = {
            "name": r.grading_source,
            "misclassified_students": n_bad,
            "flipped_lessons": sum(len(v) for v in flipped.values()),
            "diffs": {u: flipped[u] for u in students if u in flipped},
        }
    return out


def _median(values: list, mode: str) -> float:
    if mode == "mean":
        return statistics.median(values)
    if mode == "lower":
        return statistics.median_low(values)
    raise ValueError(f"unknown median mode {mode!r}")


def lesson_difficulty(reports: Sequence[MasteryReport], median: str = "mean") -> dict:
    """Median final score per lesson, per grading source."""
    out: dict = {}
    for report in reports:
        by_lesson: dict = {}
        for (_, lesson), t in report.traces.items():
            by_lesson.setdefault(lesson, []).append(t.final_score)
        for lesson, scores in by_lesson.items():
            out.setdefault(lesson, {})[report.grading_source] = _median(scores, median)
    return dict(sorted(out.items()))


# --- threshold rollups ------------------------------------------------------

LESSON_MASTERY_RATE = (4, 5)  # 80%, inclusive
SKILL_MASTERY_RATE = (3, 4)  # 75%, inclusive


@dataclass
class MasteryRollup:
    lesson_pairs: int
    lessons_mastered: int
    per_skill_mastery: dict  # skill -> students mastering it
    students_with_skill_mastery: int
    students: int
    students_mastering_two_or_more: int = 0

    @property
    def lesson_mastery_rate(self) -> float:
        return self.lessons_mastered / self.lesson_pairs if self.lesson_pairs else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesson_mastery_rate"] = self.lesson_mastery_rate
        return d


def simple_mastery_rollup(records: Sequence[AttemptRecord], grading_source="human") -> MasteryRollup:
    """Correct-rate mastery: a lesson at >= 80% correct (ignoring "other"),
    a skill when >= 75% of its attempted lessons are mastered."""
    source = resolve_source(grading_source)
    tallies: dict = {}
    skill_of: dict = {}
    students = set()
    for rec in records:
        students.add(rec.user_id)
        if rec.human_grade is Grade3.OTHER:
            continue
        key = (rec.user_id, rec.lesson_id.raw)
        skill_of[rec.lesson_id.raw] = rec.lesson_id.skill
        n_ok, n = tallies.get(key, (0, 0))
        tallies[key] = (n_ok + bool(source.judge(rec)), n + 1)

    num, den = LESSON_MASTERY_RATE
    lesson_mastered = {k: den * ok >= num * n for k, (ok, n) in tallies.items()}

    skill_tally: dict = {}
    for (user, lesson), ok in lesson_mastered.items():
        key = (user, skill_of[lesson])
        m, n = skill_tally.get(key, (0, 0))
        skill_tally[key] = (m + ok, n + 1)
    num, den = SKILL_MASTERY_RATE
    per_skill: dict = {}
    skills_per_student: dict = {}
    for (user, skill), (m, n) in skill_tally.items():
        if den * m >= num * n:
            per_skill[skill] = per_skill.get(skill, 0) + 1
            skills_per_student[user] = skills_per_student.get(user, 0) + 1
    return MasteryRollup(
        lesson_pairs=len(lesson_mastered),
        lessons_mastered=sum(lesson_mastered.values()),
        per_skill_mastery=dict(sorted(per_skill.items())),
        students_with_skill_mastery=len(skills_per_student),
        students=len(students),
        students_mastering_two_or_more=sum(1 for v in skills_per_student.values() if v >= 2),
    )
