"""Canonicalization, exact parsing and rule-based grading of student answers.

Two graders live here: :func:`naive_match` (case/whitespace-insensitive
string equality) and :func:`text_process_grade`, which layers text
substitutions and exact rational evaluation on top of it.
"""

from __future__ import annotations

import enum
import re
import unicodedata
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional, Union

__all__ = [
    "Label",
    "GradingVerdict",
    "Rational",
    "ChoiceLetter",
    "ChoiceWithValue",
    "ValueSequence",
    "OpaqueText",
    "MathValue",
    "MAX_EXPONENT",
    "load_filler_tokens",
    "canonicalize_text",
    "parse_math",
    "render",
    "equivalent",
    "naive_match",
    "text_process_grade",
]

MAX_EXPONENT = 64
CHOICE_LETTERS = "ABCDE"


class Label(str, enum.Enum):
    CORRECT = "correct_answer"
    WRONG = "wrong_answer"

    @classmethod
    def from_bool(cls, ok: bool) -> "Label":
        return cls.CORRECT if ok else cls.WRONG


@dataclass(frozen=True)
class GradingVerdict:
    label: Label
    strategy: str
    rationale: Optional[str] = None
    latency: Optional[float] = None
    parse_failed: bool = False

    @property
    def is_correct(self) -> bool:
        return self.label is Label.CORRECT


# --- value types -----------------------------------------------------------


@dataclass(frozen=True)
class Rational:
    """Exact rational; ``Fraction`` keeps it in lowest terms with d > 0."""

    value: Fraction

    @property
    def numerator(self) -> int:
        return self.value.numerator

    @property
    def denominator(self) -> int:
        return self.value.denominator


@dataclass(frozen=True)
class ChoiceLetter:
    letter: str

    def __post_init__(self):
        object.__setattr__(self, "letter", self.letter.upper())


@dataclass(frozen=True)
class ChoiceWithValue:
    letter: str
    value: Fraction

    def __post_init__(self):
        object.__setattr__(self, "letter", self.letter.upper())


@dataclass(frozen=True)
class ValueSequence:
    items: tuple  # of Rational, non-empty

    @property
    def final(self) -> "Rational":
        return self.items[-1]


@dataclass(frozen=True)
class OpaqueText:
    text: str


MathValue = Union[Rational, ChoiceLetter, ChoiceWithValue, ValueSequence, OpaqueText]


# --- canonicalization ------------------------------------------------------

_TRANSLATE = str.maketrans({
    "\u2044": "/",  # fraction slash (NFKC of vulgar fractions)
    "\u2215": "/",  # division slash
    "\u2212": "-",  # minus sign
    "\u2013": "-",  # en dash
    "\u2014": "-",  # em dash
})
_TRAILING_PUNCT = ".,;:!?"


def load_filler_tokens(path=None) -> tuple:
    """Read the filler-token list; longest tokens first so phrases win."""
    if path is None:
        text = resources.files("mathgrade").joinpath("data/filler_tokens.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    tokens = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            tokens.append(line.casefold())
    return tuple(sorted(set(tokens), key=len, reverse=True))


@lru_cache(maxsize=8)
def _filler_regex(tokens: tuple) -> re.Pattern:
    parts = []
    for tok in tokens:
        pat = re.escape(tok)
        if tok[-1].isalnum():
            pat += r"(?![\w])"
        parts.append(pat)
    return re.compile(r"^(?:%s)\s*" % "|".join(parts), re.IGNORECASE)


_DEFAULT_FILLERS: Optional[tuple] = None


def _default_fillers() -> tuple:
    global _DEFAULT_FILLERS
    if _DEFAULT_FILLERS is None:
        _DEFAULT_FILLERS = load_filler_tokens()
    return _DEFAULT_FILLERS


def _strip_single_letter_diacritics(text: str) -> str:
    base = "".join(c for c in unicodedata.normalize("NFD", text) if not unicodedata.combining(c))
    if len(base) == 1 and base.isalpha():
        return base
    return text


def _canonical_pass(text: str, filler: re.Pattern) -> str:
    text = unicodedata.normalize("NFKC", text).translate(_TRANSLATE)
    text = " ".join(text.split())
    while True:
        m = filler.match(text)
        if not m or m.end() == 0 or m.end() >= len(text):
            break
        text = text[m.end():]
    stripped = text.rstrip(_TRAILING_PUNCT).rstrip()
    if stripped:
        text = stripped
    return _strip_single_letter_diacritics(text)


def canonicalize_text(raw: str, fillers: Optional[Iterable[str]] = None) -> str:
    """Normalize a raw answer string for parsing.

    NFKC-normalizes, collapses whitespace, removes leading filler tokens
    ("is", "the answer is", "=", ...) and trailing punctuation, and maps an
    accented single letter to its base letter. Idempotent.
    """
    tokens = _default_fillers() if fillers is None else tuple(sorted(
        {t.casefold() for t in fillers}, key=len, reverse=True))
    filler = _filler_regex(tokens)
    prev = None
    text = raw
    # passes can expose new filler/punctuation, so iterate to a fixed point
    while text != prev:
        prev, text = text, _canonical_pass(text, filler)
    return text


# --- parsing ---------------------------------------------------------------

_INT = r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)"
_PLAIN_INT = r"[+-]?\d+"
_DEC = r"[+-]?(?:\d+\.\d*|\.\d+)"

_FRAC_RE = re.compile(rf"^({_PLAIN_INT})\s*/\s*({_PLAIN_INT})$")
_DEC_RE = re.compile(rf"^{_DEC}$")
_INT_RE = re.compile(rf"^{_INT}$")
_EXP_RE = re.compile(rf"^({_DEC}|{_PLAIN_INT})\s*\^\s*\(?({_PLAIN_INT})\)?$")
_CHOICE_RE = re.compile(r"^\(?([A-Ea-e])\)?$")
_CHOICE_VALUE_RE = re.compile(r"^\(?([A-Ea-e])(?:\)|[.:]|\s)[.):\s]*(\S.*)$")
_SEQ_SPLIT = re.compile(r"[=\s]+")


def _parse_scalar(text: str) -> Optional[Fraction]:
    m = _FRAC_RE.match(text)
    if m:
        den = int(m.group(2))
        if den == 0:
            return None
        return Fraction(int(m.group(1)), den)
    if _DEC_RE.match(text):
        try:
            return Fraction(Decimal(text))
        except InvalidOperation:  # pragma: no cover - regex guards this
            return None
    if _INT_RE.match(text):
        return Fraction(int(text.replace(",", "")))
    m = _EXP_RE.match(text)
    if m:
        exp = int(m.group(2))
        if abs(exp) > MAX_EXPONENT:
            return None
        base = Fraction(Decimal(m.group(1)))
        if base == 0 and exp < 0:
            return None
        return base ** exp
    return None


def parse_math(text: str) -> MathValue:
    """Parse canonicalized answer text into a :data:`MathValue`.

    Tried in order: choice letter (optionally with a value, "B.36"),
    fraction, decimal, integer, ``a^b``, then a worked answer whose
    ``=``/whitespace separated tokens contain numbers. Anything else is
    kept as casefolded :class:`OpaqueText`.
    """
    text = text.strip()
    m = _CHOICE_RE.match(text)
    if m:
        return ChoiceLetter(m.group(1))
    m = _CHOICE_VALUE_RE.match(text)
    if m:
        value = _parse_scalar(m.group(2).strip())
        if value is not None:
            return ChoiceWithValue(m.group(1), value)
    value = _parse_scalar(text)
    if value is not None:
        return Rational(value)
    if "=" in text or " " in text:
        values = []
        for tok in _SEQ_SPLIT.split(text):
            tok = tok.rstrip(_TRAILING_PUNCT)
            if not tok:
                continue
            v = _parse_scalar(tok)
            if v is not None:
                values.append(Rational(v))
        if values:
            return ValueSequence(tuple(values))
    return OpaqueText(text.casefold())


def _render_scalar(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def render(value: MathValue) -> str:
    """Inverse of :func:`parse_math` up to canonical form."""
    if isinstance(value, Rational):
        return _render_scalar(value.value)
    if isinstance(value, ChoiceLetter):
        return value.letter
    if isinstance(value, ChoiceWithValue):
        return f"{value.letter}) {_render_scalar(value.value)}"
    if isinstance(value, ValueSequence):
        return "= " + " = ".join(_render_scalar(v.value) for v in value.items)
    return value.text


def equivalent(a: MathValue, b: MathValue) -> bool:
    if isinstance(a, ValueSequence):
        a = a.final
    if isinstance(b, ValueSequence):
        b = b.final
    if isinstance(a, Rational) and isinstance(b, Rational):
        return a.value == b.value
    if isinstance(a, (ChoiceLetter, ChoiceWithValue)) and isinstance(b, (ChoiceLetter, ChoiceWithValue)):
        if a.letter != b.letter:
            return False
        if isinstance(a, ChoiceWithValue) and isinstance(b, ChoiceWithValue):
            return a.value == b.value
        return True
    if isinstance(a, OpaqueText) and isinstance(b, OpaqueText):
        return a.text == b.text
    return False


# --- graders ---------------------------------------------------------------

NAIVE = "naive_string"
TEXT_PROCESSING = "text_processing"

_BLANK = r"(?:_+|\\underline\{[^}]*\}|\\_+)"
_FRACTION_BLANK_RE = re.compile(rf"{_BLANK}\s*/\s*\d|\d\s*/\s*{_BLANK}")


def naive_match(expected: str, student: str) -> GradingVerdict:
    ok = student.strip().casefold() == expected.strip().casefold()
    return GradingVerdict(Label.from_bool(ok), NAIVE, rationale="exact_match" if ok else "no_match")


def text_process_grade(question: str, expected: str, student: str) -> GradingVerdict:
    """Rule-based grading with substitutions and exact evaluation.

    A student fraction answering a question whose blank is one component of
    a fraction ("_ / 15") is never credited here; those need interpretation
    and are left to the LLM strategies.
    """
    if naive_match(expected, student).is_correct:
        return GradingVerdict(Label.CORRECT, TEXT_PROCESSING, rationale="exact_match")
    exp_text = canonicalize_text(expected)
    stu_text = canonicalize_text(student)
    if stu_text.casefold() == exp_text.casefold():
        return GradingVerdict(Label.CORRECT, TEXT_PROCESSING, rationale="canonical_match")
    if "/" in stu_text and "/" not in exp_text and _FRACTION_BLANK_RE.search(question or ""):
        return GradingVerdict(Label.WRONG, TEXT_PROCESSING, rationale="fraction_blank_deferred")
    if equivalent(parse_math(exp_text), parse_math(stu_text)):
        return GradingVerdict(Label.CORRECT, TEXT_PROCESSING, rationale="value_equivalent")
    return GradingVerdict(Label.WRONG, TEXT_PROCESSING, rationale="no_match")
