"""Classification metrics and chance-adjusted agreement for binary grading.

Labels may be any two hashable values (``Label`` members, bools, strings);
functions that need a class order take it explicitly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .dataset import Grade3
from .normalizer import Label


@dataclass(frozen=True)
class ConfusionMatrix2:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def _as_bool(values: Sequence, positive: Hashable) -> np.ndarray:
    return np.fromiter((v == positive for v in values), dtype=bool, count=len(values))


def confusion(predictions: Sequence, gold: Sequence, positive_class: Hashable) -> ConfusionMatrix2:
    if len(predictions) != len(gold):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(gold)} gold labels")
    p = _as_bool(predictions, positive_class)
    g = _as_bool(gold, positive_class)
    return ConfusionMatrix2(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def class_metrics(cm: ConfusionMatrix2) -> ClassMetrics:
    """Accuracy/precision/recall/F1; zero denominators give 0 and set ``degenerate``."""
    if cm.total == 0:
        raise ValueError("no scored pairs")
    degenerate = False
    if cm.tp + cm.fp:
        precision = cm.tp / (cm.tp + cm.fp)
    else:
        precision, degenerate = 0.0, True
    if cm.tp + cm.fn:
        recall = cm.tp / (cm.tp + cm.fn)
    else:
        recall, degenerate = 0.0, True
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return ClassMetrics((cm.tp + cm.tn) / cm.total, precision, recall, f1, degenerate)


def _categories(*label_vectors) -> list:
    cats = []
    for vec in label_vectors:
        for v in vec:
            if v not in cats:
                cats.append(v)
    return cats


def cohen_kappa(predictions: Sequence, gold: Sequence) -> float:
    """Cohen's kappa, chance agreement from the product of the two marginals.

    With two classes this equals the linear-weighted kappa (see
    :func:`linear_weighted_kappa`). If both raters use one and the same
    class throughout, agreement is perfect and 1.0 is returned.
    """
    if len(predictions) != len(gold):
        raise ValueError("length mismatch")
    n = len(gold)
    if n == 0:
        raise ValueError("no scored pairs")
    cats = _categories(predictions, gold)
    if len(cats) > 2:
        raise ValueError(f"binary labels expected, got {cats}")
    p = _as_bool(predictions, cats[0])
    g = _as_bool(gold, cats[0])
    p_o = np.mean(p == g)
    pp, pg = p.mean(), g.mean()
    p_e = pp * pg + (1 - pp) * (1 - pg)
    if p_e == 1.0:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def linear_weighted_kappa(predictions: Sequence, gold: Sequence, categories: Sequence) -> float:
    """Weighted kappa with disagreement weights ``|i - j| / (k - 1)``.

    ``categories`` fixes the ordinal order. For ``k = 2`` the weights are
    0/1 and the statistic reduces to :func:`cohen_kappa`.
    """
    k = len(categories)
    if k < 2:
        raise ValueError("need at least two categories")
    index = {c: i for i, c in enumerate(categories)}
    n = len(gold)
    if n == 0 or len(predictions) != n:
        raise ValueError("need equal-length, non-empty label vectors")
    observed = np.zeros((k, k))
    for a, b in zip(predictions, gold):
        observed[index[a], index[b]] += 1
    observed /= n
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    idx = np.arange(k)
    weights = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    denom = float((weights * expected).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


def scott_pi(a: Sequence, b: Sequence) -> float:
    """Two-rater Fleiss kappa (Scott's pi): chance from the pooled marginal."""
    if len(a) != len(b):
        raise ValueError("length mismatch")
    first = _categories(a, b)[0]
    return fleiss_kappa(np.column_stack([_as_bool(a, first), _as_bool(b, first)]))


# --- Fleiss -----------------------------------------------------------------


@dataclass(frozen=True)
class RunsMatrix:
    """items x runs grid of binary labels (True = correct) with gold per item."""

    labels: np.ndarray
    gold: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool)
        if labels.ndim != 2:
            raise ValueError("runs matrix must be 2-D (items x runs)")
        object.__setattr__(self, "labels", labels)
        if self.gold is not None:
            gold = np.asarray(self.gold, dtype=bool)
            if gold.shape != (labels.shape[0],):
                raise ValueError("gold must have one label per item")
            object.__setattr__(self, "gold", gold)

    @property
    def n_items(self) -> int:
        return self.labels.shape[0]

    @property
    def n_runs(self) -> int:
        return self.labels.shape[1]


def _fleiss_parts(matrix) -> tuple:
    labels = matrix.labels if isinstance(matrix, RunsMatrix) else np.asarray(matrix, dtype=bool)
    if labels.ndim != 2:
        raise ValueError("ratings must be items x raters")
    n_items, n_raters = labels.shape
    if n_raters < 2 or n_items < 1:
        raise ValueError("Fleiss kappa needs >= 2 raters and >= 1 item")
    pos = labels.sum(axis=1).astype(float)
    counts = np.column_stack([pos, n_raters - pos])
    per_item = ((counts ** 2).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    p_bar = per_item.mean()
    p_j = counts.sum(axis=0) / (n_items * n_raters)
    p_e = float((p_j ** 2).sum())
    return float(p_bar), p_e


def fleiss_kappa(matrix) -> float:
    """Fleiss' kappa over items x raters for two categories.

    When every label is identical the chance term is 1; this is reported as
    1.0 (check :func:`fleiss_is_degenerate`).
    """
    p_bar, p_e = _fleiss_parts(matrix)
    if p_e == 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


def fleiss_is_degenerate(matrix) -> bool:
    return _fleiss_parts(matrix)[1] == 1.0


# --- reports ----------------------------------------------------------------

CLASS_ORDER = (Label.WRONG, Label.CORRECT)


def gold_label(record) -> Label:
    if record.human_grade is Grade3.CORRECT:
        return Label.CORRECT
    if record.human_grade is Grade3.WRONG:
        return Label.WRONG
    raise ValueError("attempts graded 'other' have no binary gold label")


@dataclass(frozen=True)
class AgreementResult:
    per_class: dict  # Label -> ClassMetrics
    kappa: float
    n: int
    confusion: dict  # Label -> ConfusionMatrix2


def agreement(predictions: Sequence[Label], gold: Sequence[Label]) -> AgreementResult:
    per_class, cms = {}, {}
    for cls in CLASS_ORDER:
        cms[cls] = confusion(predictions, gold, cls)
        per_class[cls] = class_metrics(cms[cls])
    return AgreementResult(per_class, linear_weighted_kappa(predictions, gold, CLASS_ORDER), len(gold), cms)


@dataclass
class EvaluationReport:
    results: dict  # strategy name -> AgreementResult
    excluded: dict  # strategy name -> rows dropped for error flags

    def to_dict(self) -> dict:
        out = {}
        for name, res in self.results.items():
            out[name] = {
                "n": res.n,
                "excluded": self.excluded.get(name, 0),
                "lwk": res.kappa,
                "classes": {cls.value: asdict(res.per_class[cls]) for cls in CLASS_ORDER},
                "confusion": {cls.value: asdict(res.confusion[cls]) for cls in CLASS_ORDER},
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        header = ["Strategy", "Prediction", "Accuracy", "Precision", "Recall", "F1", "LWK"]
        rows = []
        for name, res in self.results.items():
            for i, cls in enumerate(CLASS_ORDER):
                m = res.per_class[cls]
                rows.append([name if i == 0 else "", "Wrong" if cls is Label.WRONG else "Correct",
                             f"{m.accuracy:.2f}", f"{m.precision:.2f}", f"{m.recall:.2f}", f"{m.f1:.2f}",
                             f"{res.kappa:.2f}" if i == 0 else ""])
        return format_table(header, rows)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines)


def evaluation_report(graded_by_strategy: Mapping[str, Sequence], gold: Sequence,
                      *, exclude_flagged: bool = True) -> EvaluationReport:
    """Per-strategy two-row (Wrong, Correct) metric blocks plus LWK.

    ``graded_by_strategy`` maps a strategy name to graded attempts
    (``GradedAttempt``) or bare labels, aligned with ``gold`` (attempt
    records or labels).
    """
    gold_labels = [g if isinstance(g, Label) else gold_label(g) for g in gold]
    results, excluded = {}, {}
    for name, graded in graded_by_strategy.items():
        if len(graded) != len(gold_labels):
            raise ValueError(f"{name}: graded {len(graded)} attempts, gold has {len(gold_labels)}")
        preds, golds, dropped = [], [], 0
        for g, gl, ref in zip(graded, gold_labels, gold):
            if isinstance(g, Label):
                preds.append(g)
                golds.append(gl)
                continue
            if not isinstance(ref, Label) and g.attempt is not ref and g.attempt != ref:
                raise ValueError(f"{name}: graded attempts do not match the gold attempt set")
            if exclude_flagged and g.error_flag:
                dropped += 1
                continue
            preds.append(g.label)
            golds.append(gl)
        if not golds:
            raise ValueError(f"{name}: nothing left to score")
        results[name] = agreement(preds, golds)
        excluded[name] = dropped
    return EvaluationReport(results, excluded)


# --- reliability ------------------------------------------------------------


@dataclass
class ReliabilityReport:
    strategy: str
    n_items: int
    per_run_fleiss: list
    per_run_cohen: list
    inter_run_fleiss: float
    inter_run_degenerate: bool
    per_run_errors: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        runs = len(self.per_run_fleiss)
        header = ["Strategy", "Agreement"] + [f"Run {i + 1}" for i in range(runs)] + ["Fleiss's Kappa"]
        rows = [
            [self.strategy, "fleiss (vs gold)"] + [f"{v:.2f}" for v in self.per_run_fleiss]
            + [f"{self.inter_run_fleiss:.2f}"],
            ["", "cohen (vs gold)"] + [f"{v:.2f}" for v in self.per_run_cohen] + [""],
        ]
        return format_table(header, rows)


def reliability_protocol(strategy, attempts: Sequence, runs: int,
                         completer_for_run: Callable[[int], object], parallelism: int = 1,
                         grade_batch: Optional[Callable] = None) -> ReliabilityReport:
    """Grade the same items ``runs`` times and measure agreement.

    Per run: two-rater Fleiss (Scott's pi) and Cohen's kappa against the
    human label. Across runs: Fleiss' kappa over the items x runs grid.
    ``completer_for_run(i)`` supplies the session for run ``i`` (a distinct
    replay cache per run when replaying).
    """
    if runs < 2:
        raise ValueError("the reliability protocol needs at least 2 runs")
    if not attempts:
        raise ValueError("no attempts to grade")
    if grade_batch is None:
        from .cascade import batch_grade as grade_batch
    gold = np.array([gold_label(a) is Label.CORRECT for a in attempts])
    grid = np.zeros((len(attempts), runs), dtype=bool)
    errors = []
    for r in range(runs):
        result = grade_batch(strategy, attempts, completer_for_run(r), parallelism)
        grid[:, r] = [g.label is Label.CORRECT for g in result.graded]
        errors.append(result.error_count)
    per_fleiss = [fleiss_kappa(np.column_stack([grid[:, r], gold])) for r in range(runs)]
    per_cohen = [cohen_kappa(list(grid[:, r]), list(gold)) for r in range(runs)]
    matrix = RunsMatrix(grid, gold)
    return ReliabilityReport(str(getattr(strategy, "value", strategy)), len(attempts),
                             per_fleiss, per_cohen, fleiss_kappa(matrix),
                             fleiss_is_degenerate(matrix), errors)
