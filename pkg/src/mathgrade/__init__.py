"""Grading of open-response math answers and downstream mastery analytics."""

from .dataset import AttemptRecord, Grade3, LessonId, load_attempts, parse_lesson_id
from .normalizer import GradingVerdict, Label, canonicalize_text, parse_math
from .bkt import BktParams, default_params

__version__ = "0.1.0"

__all__ = [
    "AttemptRecord",
    "BktParams",
    "Grade3",
    "GradingVerdict",
    "Label",
    "LessonId",
    "canonicalize_text",
    "default_params",
    "load_attempts",
    "parse_lesson_id",
    "parse_math",
]
