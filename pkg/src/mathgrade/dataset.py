"""Loading, validation, summary and filtering of answer logs."""

from __future__ import annotations

import csv
import enum
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Optional, Sequence

log = logging.getLogger(__name__)

COLUMNS = (
    "lesson",
    "question_number",
    "question_text",
    "expected_answer",
    "student_response",
    "model_grade",
    "human_grade",
    "time",
    "user_id",
)

PROFILE_COLUMNS = (
    "user_id",
    "first_use",
    "country_code",
    "self_reported_age",
    "message_count",
    "active_days",
)

# Two totals are published for the full log; the file itself is authoritative.
PUBLISHED_TOTALS = {"summary_table": 53_031, "dataset_description": 53_298}
DATASET_GRADE_RANGE = range(6, 10)


class Grade3(str, enum.Enum):
    CORRECT = "correct"
    WRONG = "wrong"
    OTHER = "other"


class LessonIdError(ValueError):
    def __init__(self, text: str):
        super().__init__(f"malformed lesson id: {text!r}")
        self.text = text


class SchemaError(ValueError):
    """The input file does not carry the expected columns."""


_LESSON_RE = re.compile(r"^G([1-9])\.([A-Z])([1-9]\d*(?:\.[1-9]\d*)*)$")


@dataclass(frozen=True)
class LessonId:
    grade_level: int
    domain_code: str
    path: tuple
    raw: str

    def __str__(self) -> str:
        return f"G{self.grade_level}.{self.domain_code}{'.'.join(map(str, self.path))}"

    @property
    def skill(self) -> str:
        """Skill key: the lesson id without its trailing difficulty component."""
        if len(self.path) == 1:
            return self.raw
        return f"G{self.grade_level}.{self.domain_code}{'.'.join(map(str, self.path[:-1]))}"

    @property
    def in_dataset_range(self) -> bool:
        return self.grade_level in DATASET_GRADE_RANGE


def parse_lesson_id(text: str) -> LessonId:
    m = _LESSON_RE.match(text.strip())
    if not m:
        raise LessonIdError(text)
    path = tuple(int(p) for p in m.group(3).split("."))
    return LessonId(int(m.group(1)), m.group(2), path, text.strip())


@dataclass(frozen=True)
class AttemptRecord:
    lesson_id: LessonId
    question_number: int
    question_text: str
    expected_answer: str
    student_response: str
    model_grade: Grade3
    human_grade: Grade3
    time: datetime
    user_id: str

    @property
    def lesson(self) -> str:
        return self.lesson_id.raw

    def to_row(self, time_format: Optional[str] = None) -> dict:
        return {
            "lesson": self.lesson_id.raw,
            "question_number": str(self.question_number),
            "question_text": self.question_text,
            "expected_answer": self.expected_answer,
            "student_response": self.student_response,
            "model_grade": self.model_grade.value,
            "human_grade": self.human_grade.value,
            "time": format_time(self.time, time_format),
            "user_id": self.user_id,
        }


@dataclass(frozen=True)
class RowError:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class LoadResult:
    records: list
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


# --- time -------------------------------------------------------------------

_MONTH_FIRST = ("%m/%d/%y %H:%M", "%m/%d/%Y %H:%M", "%m/%d/%y %H:%M:%S", "%m/%d/%Y %H:%M:%S")
_DAY_FIRST = tuple(f.replace("%m/%d", "%d/%m") for f in _MONTH_FIRST)


def parse_time(text: str, day_first: bool = False) -> datetime:
    text = text.strip()
    for fmt in _DAY_FIRST if day_first else _MONTH_FIRST:
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            pass
    return datetime.fromisoformat(text)


def format_time(ts: datetime, fmt: Optional[str] = None) -> str:
    if fmt is not None:
        return ts.strftime(fmt)
    # the source files write month, day and hour without zero padding
    return f"{ts.month}/{ts.day}/{ts:%y} {ts.hour}:{ts:%M}"


# --- loading ----------------------------------------------------------------


def _iter_rows(path: Path):
    """Yield ``(line_number, row_dict)`` and check the header first."""
    if path.suffix in (".jsonl", ".ndjson"):
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, exc
                    continue
                missing = [c for c in COLUMNS if c not in row]
                if missing:
                    raise SchemaError(f"line {lineno}: missing columns {missing}")
                yield lineno, {k: "" if row[k] is None else str(row[k]) for k in COLUMNS}
        return
    delimiter = "\t" if path.suffix in (".tsv", ".tab") else ","
    with path.open(encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"missing columns {missing}; found {header}")
        for row in reader:
            yield reader.line_num, row


def _record_from_row(row: dict, day_first: bool) -> AttemptRecord:
    lesson = parse_lesson_id(row["lesson"])
    try:
        qn = int(row["question_number"])
    except ValueError:
        raise ValueError(f"question_number not an integer: {row['question_number']!r}") from None
    if qn < 1:
        raise ValueError(f"question_number must be >= 1, got {qn}")
    if not row["expected_answer"].strip():
        raise ValueError("expected_answer is empty")
    grades = []
    for col in ("model_grade", "human_grade"):
        value = row[col].strip().lower()
        try:
            grades.append(Grade3(value))
        except ValueError:
            raise ValueError(f"invalid {col} {row[col]!r}") from None
    try:
        ts = parse_time(row["time"], day_first)
    except ValueError:
        raise ValueError(f"unparseable time {row['time']!r}") from None
    return AttemptRecord(lesson, qn, row["question_text"], row["expected_answer"],
                         row["student_response"], grades[0], grades[1], ts, row["user_id"].strip())


def load_attempts(source, *, day_first: bool = False) -> LoadResult:
    """Read an answer log (CSV, TSV or JSON lines).

    Bad rows are collected as :class:`RowError` with their line number;
    a missing column raises :class:`SchemaError`.
    """
    path = Path(source)
    records, errors, warnings = [], [], []
    for lineno, row in _iter_rows(path):
        if isinstance(row, Exception):
            errors.append(RowError(lineno, f"invalid JSON: {row}"))
            continue
        try:
            rec = _record_from_row(row, day_first)
        except ValueError as exc:
            errors.append(RowError(lineno, str(exc)))
            continue
        if not rec.lesson_id.in_dataset_range:
            warnings.append(RowError(lineno, f"grade level {rec.lesson_id.grade_level} outside 6-9"))
        records.append(rec)
    if errors:
        log.warning("%s: %d row errors", path, len(errors))
    return LoadResult(records, errors, warnings)


def write_attempts(path, records: Iterable[AttemptRecord], extra: Optional[Sequence[dict]] = None,
                   extra_columns: Sequence[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    delimiter = "\t" if path.suffix in (".tsv", ".tab") else ","
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(COLUMNS) + list(extra_columns),
                                delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        for i, rec in enumerate(records):
            row = rec.to_row()
            if extra is not None:
                row.update(extra[i])
            writer.writerow(row)


@dataclass(frozen=True)
class StudentProfile:
    user_id: str
    first_use: Optional[datetime]
    country_code: str
    self_reported_age: Optional[int]
    message_count: int
    active_days: int


def load_profiles(source) -> dict:
    """Demographics table keyed by ``user_id`` (duplicates are an error)."""
    out = {}
    with Path(source).open(encoding="utf-8-sig", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PROFILE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"missing columns {missing}")
        for row in reader:
            uid = row["user_id"].strip()
            if uid in out:
                raise ValueError(f"line {reader.line_num}: duplicate user_id {uid!r}")
            first = row["first_use"].strip()
            age = row["self_reported_age"].strip()
            out[uid] = StudentProfile(
                uid,
                parse_time(first) if first else None,
                row["country_code"].strip(),
                int(age) if age else None,
                int(row["message_count"] or 0),
                int(row["active_days"] or 0),
            )
    return out


# --- summary ----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSummary:
    total_answers: int = 0
    correct_count: int = 0
    wrong_count: int = 0
    other_count: int = 0
    unique_students: int = 0
    lesson_count: int = 0
    skill_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: Iterable[AttemptRecord]) -> DatasetSummary:
    counts = {g: 0 for g in Grade3}
    users, lessons, skills = set(), set(), set()
    for rec in records:
        counts[rec.human_grade] += 1
        users.add(rec.user_id)
        lessons.add(rec.lesson_id.raw)
        skills.add(rec.lesson_id.skill)
    return DatasetSummary(
        total_answers=sum(counts.values()),
        correct_count=counts[Grade3.CORRECT],
        wrong_count=counts[Grade3.WRONG],
        other_count=counts[Grade3.OTHER],
        unique_students=len(users),
        lesson_count=len(lessons),
        skill_count=len(skills),
    )


def published_total_checks(summary: DatasetSummary) -> dict:
    return {name: {"published": n, "matches": summary.total_answers == n}
            for name, n in PUBLISHED_TOTALS.items()}


# --- hard subset ------------------------------------------------------------

_INT_RE = re.compile(r"^[+-]?\d+$")


def load_exclusions(source) -> frozenset:
    """Read ``lesson_id,question_number`` pairs (blank lines and ``#`` ignored)."""
    pairs = set()
    with Path(source).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                lesson, qn = (p.strip() for p in line.split(","))
                pairs.add((parse_lesson_id(lesson).raw, int(qn)))
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: bad exclusion entry {line!r}") from exc
    return frozenset(pairs)


def _trivially_wrong_integer(expected: str, student: str) -> bool:
    if _INT_RE.match(expected) and _INT_RE.match(student):
        return int(expected) != int(student)
    return False


def build_hard_subset(records: Sequence[AttemptRecord], exclusions: Iterable = ()) -> list:
    """Reduce an answer log to the hard-to-grade subset.

    Steps, in order: drop human "other"; keep one occurrence per
    (question, expected, response), the earliest by time then file order;
    drop responses identical to the expected answer; drop single-character
    mismatches; drop integer responses to a different integer answer; drop
    excluded (lesson, question_number) pairs. Survivors keep input order.
    """
    exclusions = {(str(lesson), int(qn)) for lesson, qn in exclusions}
    kept = [(i, r) for i, r in enumerate(records) if r.human_grade is not Grade3.OTHER]

    first_seen: dict = {}
    for i, rec in kept:
        key = (rec.question_text, rec.expected_answer, rec.student_response)
        best = first_seen.get(key)
        if best is None or (rec.time, i) < (records[best].time, best):
            first_seen[key] = i
    winners = set(first_seen.values())

    out = []
    for i, rec in kept:
        if i not in winners:
            continue
        expected = rec.expected_answer.strip()
        student = " ".join(rec.student_response.split())
        if student == expected:
            continue
        if len(expected) == 1 and len(student) == 1:
            continue
        if _trivially_wrong_integer(expected, student):
            continue
        if (rec.lesson_id.raw, rec.question_number) in exclusions:
            continue
        out.append(rec)
    return out


# --- first attempts ---------------------------------------------------------


def _first_by_question(attempts: Iterable) -> list:
    best: dict = {}
    for i, rec in attempts:
        cur = best.get(rec.question_number)
        if cur is None or (rec.time, i) < (cur[1].time, cur[0]):
            best[rec.question_number] = (i, rec)
    return [best[q][1] for q in sorted(best) if best[q][1].human_grade is not Grade3.OTHER]


def first_attempts(records: Sequence[AttemptRecord], user_id: str, lesson_id) -> list:
    """Earliest attempt per question for one student in one lesson.

    Questions whose first attempt was human-graded "other" are dropped, not
    replaced by a later attempt. Output is ordered by question number.
    """
    lesson = str(getattr(lesson_id, "raw", lesson_id))
    return _first_by_question(
        (i, r) for i, r in enumerate(records) if r.user_id == user_id and r.lesson_id.raw == lesson)


def group_first_attempts(records: Sequence[AttemptRecord]) -> dict:
    """:func:`first_attempts` for every (user, lesson) pair in one pass."""
    groups: dict = {}
    for i, rec in enumerate(records):
        groups.setdefault((rec.user_id, rec.lesson_id.raw), []).append((i, rec))
    out = {}
    for key in sorted(groups, key=_pair_sort_key):
        firsts = _first_by_question(groups[key])
        if firsts:
            out[key] = firsts
    return out


def _pair_sort_key(key):
    user, lesson = key
    return (int(user) if user.isdigit() else float("inf"), user, lesson)
