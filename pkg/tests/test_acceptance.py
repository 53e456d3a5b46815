"""One check per acceptance criterion, each reporting a PASS/FAIL/SKIP line.

The lines are printed as they run (visible with ``-s``) and collected into an
"acceptance criteria" section at the end of the pytest run.

Criteria that need the public answer log run only when it is available:

    MATHGRADE_AMMORE_PATH        the full answer log (CSV)
    MATHGRADE_AMMORE_EXCLUSIONS  the published (lesson, question) exclusion list
"""

import os
import random
import time
from fractions import Fraction

import numpy as np
import pytest

import make_replay
import oracles
from conftest import ACCEPTANCE_LINES, DATA, make_attempt
from mathgrade import bkt, cascade, dataset, llm, metrics
from mathgrade.cascade import GradingStrategyId as G
from mathgrade.normalizer import Label, naive_match, text_process_grade

AMMORE = os.environ.get("MATHGRADE_AMMORE_PATH")
EXCLUSIONS = os.environ.get("MATHGRADE_AMMORE_EXCLUSIONS")
needs_ammore = pytest.mark.skipif(not (AMMORE and os.path.isfile(AMMORE)),
                                  reason="set MATHGRADE_AMMORE_PATH to the public answer log")


def verdict(n, ok, title, detail=""):
    line = f"AC-{n} {'PASS' if ok else 'FAIL'} {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def skip_line(n, title, why):
    line = f"AC-{n} SKIP {title}: {why}"
    ACCEPTANCE_LINES.append(line)
    print(line)


C, W = Label.CORRECT, Label.WRONG


@pytest.fixture(scope="module")
def ammore_records():
    result = dataset.load_attempts(AMMORE)
    return result.records


@pytest.fixture(scope="module")
def ammore_hard(ammore_records):
    exclusions = dataset.load_exclusions(EXCLUSIONS) if EXCLUSIONS else ()
    return dataset.build_hard_subset(ammore_records, exclusions)


def test_ac1_metric_oracles():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    worst = 0.0
    for _ in range(1000):
        n = rng.randint(1, 50)
        pred = [rng.choice((C, W)) for _ in range(n)]
        gold = [rng.choice((C, W)) for _ in range(n)]
        for pos in (C, W):
            m = metrics.class_metrics(metrics.confusion(pred, gold, pos))
            want = oracles.class_metrics(pred, gold, pos)
            worst = max(worst, *(abs(a - float(b)) for a, b in zip((m.accuracy, m.precision, m.recall, m.f1), want)))
        worst = max(worst, abs(metrics.cohen_kappa(pred, gold) - float(oracles.cohen_kappa(pred, gold))))
    fixture = metrics.cohen_kappa([C, C, W, W, W, C], [C, C, C, W, W, W])
    exact = Fraction(fixture).limit_denominator(1000) == Fraction(1, 3) and abs(fixture - 1 / 3) < 1e-15
    elapsed = time.perf_counter() - t0
    verdict(1, worst <= 1e-12 and exact and elapsed < 5, "metric oracle suite",
            f"1000 cases, max |diff| {worst:.1e}, 6-item kappa {fixture!r}, {elapsed:.2f}s")


def test_ac2_weighted_kappa_equals_cohen():
    rng = random.Random(7)
    mismatches = 0
    for _ in range(1000):
        n = rng.randint(1, 50)
        pred = [rng.choice((C, W)) for _ in range(n)]
        gold = [rng.choice((C, W)) for _ in range(n)]
        lwk = metrics.linear_weighted_kappa(pred, gold, metrics.CLASS_ORDER)
        exact = oracles.cohen_kappa(pred, gold)
        if abs(lwk - float(exact)) > 1e-12 or abs(metrics.cohen_kappa(pred, gold) - lwk) > 1e-12:
            mismatches += 1
    verdict(2, mismatches == 0, "two-class weighted kappa is Cohen's kappa", f"{mismatches} mismatches in 1000")


def test_ac3_fleiss_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(300):
        grid = rng.random((rng.integers(1, 21), rng.integers(2, 11))) < rng.random()
        worst = max(worst, abs(metrics.fleiss_kappa(grid) - float(oracles.fleiss_kappa(grid.tolist()))))
    perfect = metrics.fleiss_kappa(np.array([[1, 1, 1], [0, 0, 0]], dtype=bool))
    verdict(3, worst <= 1e-12 and perfect == 1.0, "Fleiss oracle suite",
            f"300 grids up to 20x10, max |diff| {worst:.1e}, perfect agreement {perfect}")


def test_ac4_bkt_golden_values():
    p = bkt.default_params()
    args = tuple(Fraction(str(x)) for x in (p.p_l0, p.p_t, p.p_s, p.p_g))
    one_c = bkt.bkt_trace([True], p)[0]
    one_w = bkt.bkt_trace([False], p)[0]
    ten = bkt.bkt_trace([True] * 10, p)
    ok = (abs(one_c - float(oracles.bkt_final([1], *args)[0])) <= 1e-9
          and abs(one_w - float(oracles.bkt_final([0], *args)[0])) <= 1e-9
          # the quoted six-digit values mix rounding (0.629339) and truncation (0.260329)
          and abs(one_c - 0.629339) < 1e-6 and abs(one_w - 0.260329) < 1e-6
          and all(b > a for a, b in zip(ten, ten[1:])))
    rng = random.Random(4)
    bounded = True
    for _ in range(2000):
        params = bkt.BktParams(rng.uniform(0.01, 0.99), rng.uniform(0.001, 0.3),
                               rng.uniform(0.05, 0.45), rng.uniform(0.05, 0.45))
        obs = [rng.random() < 0.5 for _ in range(rng.randint(1, 10))]
        bounded &= all(0.0 < x < 1.0 for x in bkt.bkt_trace(obs, params))
    verdict(4, ok and bounded, "knowledge tracing golden values",
            f"one correct {one_c:.9f}, one incorrect {one_w:.9f}, 10-correct increasing, 2000 fuzzed traces in (0,1)")


def test_ac5_normalizer_corpus():
    import csv
    from importlib import resources
    rows = list(csv.DictReader(resources.files("mathgrade").joinpath("data/normalizer_corpus.csv")
                               .read_text(encoding="utf-8").splitlines()))
    failures = [r["source"] or r["student"] for r in rows
                if naive_match(r["expected"], r["student"]).label.value != r["naive_string"]
                or text_process_grade(r["question"], r["expected"], r["student"]).label.value != r["text_processing"]]
    q = "Fill in the missing number: $1/5 \\times 2/3 = _ / 15$"

    class Fixed:
        model_name = llm.DEFAULT_MODEL

        def __init__(self, answer):
            self.answer = answer

        def complete(self, request):
            return self.answer, 0.0

    attempt = make_attempt(question=q, expected="2", student="30/15")
    follows = (cascade.cascade_grade(attempt, Fixed("no")).label is W
               and cascade.cascade_grade(attempt, Fixed("yes")).label is C)
    checks = {
        "naive accepts 514": naive_match("2", "2").is_correct,
        "text accepts 'is 2'": text_process_grade(q, "2", "is 2").is_correct,
        "text accepts '=6+6 =12'": text_process_grade("$3^2 + 3^1 = \\underline{\\quad}$", "12", "=6+6 =12").is_correct,
        "30/15 rejected only when the model rejects": follows,
        "rules mark 2/15 wrong (known limitation)": not text_process_grade(q, "2", "2/15").is_correct,
    }
    bad = [k for k, v in checks.items() if not v]
    verdict(5, not failures and not bad, "normalizer corpus",
            f"{len(rows) - len(failures)}/{len(rows)} corpus rows" + (f"; failed {failures + bad}" if failures or bad else ""))


def test_ac6_synthetic_pipeline(synthetic_records, synthetic_expected):
    summary = dataset.summarize(synthetic_records).to_dict()
    hard = dataset.build_hard_subset(synthetic_records)
    hard_ex = dataset.build_hard_subset(synthetic_records, dataset.load_exclusions(DATA / "synthetic_exclusions.txt"))
    want = synthetic_expected["hard_subset"]
    ok = (summary == synthetic_expected["summary"] and len(hard) == want["without_exclusions"]
          and len(hard_ex) == want["with_exclusions"])
    verdict(6, ok, "dataset pipeline on the 200-row synthetic fixture",
            f"summary {summary['total_answers']}/{summary['correct_count']}/{summary['wrong_count']}/"
            f"{summary['other_count']}/{summary['unique_students']}, hard {len(hard)} -> {len(hard_ex)} with exclusions")


@needs_ammore
def test_ac6_full_dataset(ammore_records, ammore_hard):
    s = dataset.summarize(ammore_records)
    got = (s.total_answers, s.correct_count, s.wrong_count, s.other_count, s.unique_students)
    ok = got == (53031, 34668, 15278, 3085, 2508) and (not EXCLUSIONS or len(ammore_hard) == 4463)
    verdict(6, ok, "dataset pipeline on the full answer log",
            f"summary {got}, hard subset {len(ammore_hard)}" + ("" if EXCLUSIONS else " (no exclusion list given)"))


@needs_ammore
def test_ac7_rule_based_table(ammore_hard):
    t0 = time.perf_counter()
    gold = ammore_hard
    results = {}
    for sid in (G.NAIVE_STRING, G.TEXT_PROCESSING):
        graded = cascade.batch_grade(sid, ammore_hard).graded
        results[sid] = metrics.evaluation_report({sid.value: graded}, gold).results[sid.value]
    elapsed = time.perf_counter() - t0
    naive = results[G.NAIVE_STRING].per_class[C]
    text = results[G.TEXT_PROCESSING].per_class[C]
    ok = (abs(naive.accuracy - 0.79) <= 0.02 and abs(naive.recall - 0.39) <= 0.05
          and text.accuracy >= 0.93 and elapsed < 60)
    verdict(7, ok, "rule-based metric table",
            f"naive accuracy {naive.accuracy:.3f} recall(correct) {naive.recall:.3f}, "
            f"text accuracy {text.accuracy:.3f}, {elapsed:.1f}s")


@needs_ammore
def test_ac8_mastery_rollups(ammore_records):
    r = bkt.simple_mastery_rollup(ammore_records, "human")
    ok = abs(r.lesson_mastery_rate - 0.48) <= 0.01 and r.students_with_skill_mastery == 1133
    verdict(8, ok, "mastery rollups",
            f"lesson mastery {r.lesson_mastery_rate:.3f}, students with a mastered skill {r.students_with_skill_mastery}")


def test_ac_ammore_skips_are_reported():
    if AMMORE and os.path.isfile(AMMORE):
        pytest.skip("answer log present; full-data criteria ran")
    for n, title in ((6, "dataset pipeline on the full answer log"), (7, "rule-based metric table"),
                     (8, "mastery rollups")):
        skip_line(n, title, "public answer log not available (set MATHGRADE_AMMORE_PATH)")


def test_ac9_cascade_contract(synthetic_records):
    class Counting:
        model_name = llm.DEFAULT_MODEL

        def __init__(self, accept):
            self.accept, self.calls = accept, 0

        def complete(self, request):
            self.calls += 1
            return ("yes" if request.student_response in self.accept else "no"), 0.0

    records = [r for r in synthetic_records if r.human_grade is not dataset.Grade3.OTHER]
    accept = {r.student_response for r in records[::4]}
    short = lenient = True
    for rec in records:
        comp = Counting(accept)
        g = cascade.cascade_grade(rec, comp)
        rules = (naive_match(rec.expected_answer, rec.student_response).is_correct
                 or text_process_grade(rec.question_text, rec.expected_answer, rec.student_response).is_correct)
        short &= (comp.calls == 0) == rules
        lenient &= g.label is Label.from_bool(rules or rec.student_response in accept)
    runs = [[(g.label, g.stage_trace) for g in cascade.batch_grade(G.CASCADE_TEXT_ZERO_SHOT, records,
                                                                   Counting(accept), par)] for par in (1, 3, 8)]
    same = runs[0] == runs[1] == runs[2]
    verdict(9, short and lenient and same, "cascade contract",
            f"short-circuit {short}, monotone {lenient}, identical at parallelism 1/3/8 {same} ({len(records)} items)")


def test_ac10_llm_replay():
    completer = llm.Completer(llm.CacheMode.REPLAY, cache=llm.ReplayCache(DATA / "figures.jsonl"))
    cot_ok = True
    for attempt, rationale in ((make_replay.WORKED, make_replay.WORKED_RATIONALE),
                               (make_replay.PLACE_VALUE, make_replay.PLACE_VALUE_RATIONALE)):
        v = llm.grade_llm(llm.Strategy.CHAIN_OF_THOUGHT, attempt, completer).verdict
        cot_ok &= v.label is W and v.rationale == rationale
    items = make_replay.reliability_items()
    caches = [llm.ReplayCache(DATA / "reliability" / f"run_{r + 1}.jsonl") for r in range(3)]
    rep = metrics.reliability_protocol(G.LLM_ZERO_SHOT, items, 3,
                                       lambda r: llm.Completer(llm.CacheMode.REPLAY, cache=caches[r]))
    grid = [[bool(make_replay.RUN_LABELS[r][i]) for r in range(3)] for i in range(len(items))]
    want = float(oracles.fleiss_kappa(grid))
    shaped = len(rep.per_run_fleiss) == len(rep.per_run_cohen) == 3 and "Fleiss's Kappa" in rep.to_text()
    ok = cot_ok and shaped and abs(rep.inter_run_fleiss - want) <= 1e-12
    verdict(10, ok, "model behavior under replay",
            f"CoT rationales exact {cot_ok}; 20 items x 3 runs inter-run Fleiss {rep.inter_run_fleiss:.6f} "
            f"(oracle {want:.6f})")


def test_ac11_misclassification():
    recs = [make_attempt(user=u, qn=q, minute=q) for u in ("1", "2", "3") for q in range(1, 4)]
    gold = bkt.mastery_report(recs, "human")
    labels = {r: not (r.user_id == "2" and r.question_number == 1) for r in recs}
    other = bkt.mastery_report(recs, bkt.labels_source("flipped", labels))
    frac = bkt.misclassification_comparison(other, None, gold)["fraction_students_misclassified_a"]
    self_frac = bkt.misclassification_comparison(gold, None, gold)["fraction_students_misclassified_a"]
    ok = Fraction(frac).limit_denominator(10) == Fraction(1, 3) and abs(frac - 1 / 3) < 1e-15 and self_frac == 0
    verdict(11, ok, "misclassification analysis", f"3-student fixture {frac!r}, self-comparison {self_frac}")
