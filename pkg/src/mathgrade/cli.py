"""Command-line pipelines: ``mathgrade <subcommand> ...``.

Settings resolve as: command-line flag > ``--config`` JSON file >
``MATHGRADE_*`` environment variable > built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from . import __version__, bkt, cascade, dataset, llm, metrics

log = logging.getLogger("mathgrade")

ENV_PREFIX = "MATHGRADE_"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data: Optional[str] = None
    demographics: Optional[str] = None
    exclusions: Optional[str] = None
    day_first: bool = False
    strategy: str = "text_processing"
    strategies: list = field(default_factory=lambda: ["naive_string", "text_processing"])
    cascade_llm: str = "zero_shot"
    model: str = llm.DEFAULT_MODEL
    endpoint: str = llm.DEFAULT_ENDPOINT
    credential_env: str = llm.DEFAULT_CREDENTIAL_ENV
    timeout: float = llm.DEFAULT_TIMEOUT
    cache_mode: str = "live"
    cache: Optional[str] = None
    parallelism: int = 1
    p_l0: float = 0.4
    p_t: float = 0.05
    p_s: float = 0.299
    p_g: float = 0.299
    threshold: float = bkt.DEFAULT_THRESHOLD
    strict_lessons: bool = False
    median: str = "mean"
    sources: list = field(default_factory=lambda: ["naive_string", "llm_cot", "human"])
    lesson: Optional[str] = None
    runs: int = 10
    items: int = 100
    seed: int = 0
    out: str = "out"
    strict: bool = False
    progress: bool = False

    def validate(self) -> None:
        mode = llm.CacheMode(self.cache_mode)
        if mode is llm.CacheMode.REPLAY and not self.cache:
            raise UsageError("--cache-mode replay requires --cache")
        if mode is llm.CacheMode.RECORD and not self.cache:
            raise UsageError("--cache-mode record requires --cache")
        if self.parallelism < 1:
            raise UsageError("--parallelism must be >= 1")

    def needs_credential(self) -> None:
        if llm.CacheMode(self.cache_mode) is not llm.CacheMode.REPLAY and not os.environ.get(self.credential_env):
            raise UsageError(f"{self.cache_mode} mode needs a credential in ${self.credential_env}")

    @property
    def params(self) -> bkt.BktParams:
        return bkt.BktParams(self.p_l0, self.p_t, self.p_s, self.p_g)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(kind, value):
    if kind is bool or kind == "bool":
        return value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes", "on")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    if kind in (list, "list"):
        return value if isinstance(value, list) else [v.strip() for v in str(value).split(",") if v.strip()]
    return value


def _field_kind(f):
    default = f.default if f.default is not MISSING else f.default_factory()
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, list):
        return list
    return str


def build_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    cfg = RunConfig()
    kinds = {f.name: _field_kind(f) for f in fields(RunConfig)}
    for name, kind in kinds.items():
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            setattr(cfg, name, _coerce(kind, env))
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(data) - set(kinds)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for name, value in data.items():
            setattr(cfg, name, _coerce(kinds[name], value))
    for name, kind in kinds.items():
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, _coerce(kind, value))
    cfg.validate()
    return cfg


# --- helpers ----------------------------------------------------------------


def _file_digest(path) -> Optional[str]:
    if not path or not Path(path).is_file():
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def provenance(cfg: RunConfig, cache_digest: Optional[str] = None) -> dict:
    return {
        "tool_version": __version__,
        "config_hash": cfg.digest(),
        "dataset_hash": _file_digest(cfg.data),
        "cache_hash": cache_digest,
    }


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _load(cfg: RunConfig) -> dataset.LoadResult:
    if not cfg.data:
        raise UsageError("--data is required")
    if not Path(cfg.data).is_file():
        raise UsageError(f"dataset not found: {cfg.data}")
    result = dataset.load_attempts(cfg.data, day_first=cfg.day_first)
    for err in result.errors[:20]:
        log.error("%s: %s", cfg.data, err)
    return result


def _completer(cfg: RunConfig, cache_path: Optional[str] = None) -> llm.Completer:
    mode = llm.CacheMode(cfg.cache_mode)
    path = cache_path or cfg.cache
    cache = llm.ReplayCache(path) if path else None
    if mode is llm.CacheMode.REPLAY:
        if path is None or not Path(path).is_file():
            raise UsageError(f"replay cache not found: {path}")
        return llm.Completer(mode, cache=cache, model_name=cfg.model)
    cfg.needs_credential()
    client = llm.ChatCompletionClient(cfg.endpoint, credential_env=cfg.credential_env,
                                      timeout=cfg.timeout, max_in_flight=cfg.parallelism)
    return llm.Completer(mode, client=client, cache=cache, model_name=cfg.model)


def _needs_llm(strategies) -> bool:
    return any(cascade.GradingStrategyId(s).needs_llm for s in strategies)


def _progress(cfg: RunConfig):
    if not cfg.progress:
        return None

    def report(done, total):
        if done == total or done % 100 == 0:
            print(f"\r{done}/{total}", end="\n" if done == total else "", file=sys.stderr, flush=True)
    return report


def _grade_all(cfg, strategy, records, completer):
    return cascade.batch_grade(strategy, records, completer, cfg.parallelism,
                               progress=_progress(cfg), cascade_llm=llm.Strategy(cfg.cascade_llm))


# --- commands ---------------------------------------------------------------


def cmd_summarize(cfg: RunConfig) -> int:
    loaded = _load(cfg)
    summary = dataset.summarize(loaded.records)
    payload = {
        "provenance": provenance(cfg),
        "summary": summary.to_dict(),
        "published_totals": dataset.published_total_checks(summary),
        "row_errors": [str(e) for e in loaded.errors],
        "warnings": len(loaded.warnings),
    }
    if cfg.demographics:
        payload["profiles"] = len(dataset.load_profiles(cfg.demographics))
    _write_json(Path(cfg.out) / "summary.json", payload)
    print(json.dumps(summary.to_dict(), indent=2))
    return 1 if loaded.errors else 0


def cmd_filter_hard(cfg: RunConfig) -> int:
    loaded = _load(cfg)
    exclusions = dataset.load_exclusions(cfg.exclusions) if cfg.exclusions else frozenset()
    hard = dataset.build_hard_subset(loaded.records, exclusions)
    out = Path(cfg.out)
    dataset.write_attempts(out / "ammore_hard.csv", hard)
    counts = {
        "input_records": len(loaded.records),
        "hard_records": len(hard),
        "correct": sum(r.human_grade is dataset.Grade3.CORRECT for r in hard),
        "wrong": sum(r.human_grade is dataset.Grade3.WRONG for r in hard),
        "exclusion_pairs": len(exclusions),
    }
    _write_json(out / "filter_report.json", {"provenance": provenance(cfg), "counts": counts})
    print(json.dumps(counts, indent=2))
    return 1 if loaded.errors else 0


def cmd_grade(cfg: RunConfig) -> int:
    strategy = cascade.GradingStrategyId(cfg.strategy)
    loaded = _load(cfg)
    records = [r for r in loaded.records if r.human_grade is not dataset.Grade3.OTHER]
    completer = _completer(cfg) if strategy.needs_llm else None
    result = _grade_all(cfg, strategy, records, completer)
    out = Path(cfg.out) / f"graded_{strategy.value}.csv"
    cascade.write_graded(out, result.graded)
    print(f"graded {len(result)} attempts with {strategy.value} -> {out} ({result.error_count} errors)")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    loaded = _load(cfg)
    records = [r for r in loaded.records if r.human_grade is not dataset.Grade3.OTHER]
    completer = _completer(cfg) if _needs_llm(cfg.strategies) else None
    graded = {}
    for name in cfg.strategies:
        graded[name] = _grade_all(cfg, name, records, completer).graded
    report = metrics.evaluation_report(graded, records)
    latencies = llm.latency_report(
        (name, g.verdict.latency) for name, rows in graded.items() for g in rows
        if cascade.GradingStrategyId(name).needs_llm)
    out = Path(cfg.out)
    cache_digest = completer.cache.digest() if completer and completer.cache else None
    _write_json(out / "evaluation.json", {"provenance": provenance(cfg, cache_digest),
                                          "report": report.to_dict(), "latency": latencies})
    text = report.to_text()
    (out / "evaluation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    degenerate = any(m.degenerate for r in report.results.values() for m in r.per_class.values())
    return 3 if cfg.strict and degenerate else 0


def sample_items(records, n: int, seed: int) -> list:
    pool = [r for r in records if r.human_grade is not dataset.Grade3.OTHER]
    if n >= len(pool):
        return pool
    idx = sorted(random.Random(seed).sample(range(len(pool)), n))
    return [pool[i] for i in idx]


def cmd_reliability(cfg: RunConfig) -> int:
    if cfg.runs < 2:
        raise UsageError("--runs must be >= 2")
    strategy = cascade.GradingStrategyId(cfg.strategy)
    loaded = _load(cfg)
    items = sample_items(loaded.records, cfg.items, cfg.seed)
    completers = {}

    def completer_for_run(r):
        path = cfg.cache.format(run=r + 1) if cfg.cache and "{run}" in cfg.cache else cfg.cache
        if path not in completers:
            completers[path] = _completer(cfg, path) if strategy.needs_llm else None
        return completers[path]

    report = metrics.reliability_protocol(strategy, items, cfg.runs, completer_for_run, cfg.parallelism)
    out = Path(cfg.out)
    _write_json(out / "reliability.json", {"provenance": provenance(cfg), "report": report.to_dict()})
    text = report.to_text()
    (out / "reliability.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 3 if cfg.strict and report.inter_run_degenerate else 0


def _source_for(cfg, name, records, completer):
    if name in ("human", "model", "naive_string", "text_processing"):
        return bkt.resolve_source(name)
    result = _grade_all(cfg, name, records, completer)
    labels = {g.attempt: g.label for g in result.graded}
    return bkt.labels_source(name, labels)


def cmd_bkt(cfg: RunConfig) -> int:
    if len(cfg.sources) not in (2, 3):
        raise UsageError("--sources takes 2 or 3 names: compared source(s) then the gold source")
    loaded = _load(cfg)
    records = loaded.records
    groups = dataset.group_first_attempts(records)
    traced = [a for attempts in groups.values() for a in attempts]
    llm_names = [s for s in cfg.sources if s not in ("human", "model", "naive_string", "text_processing")]
    completer = _completer(cfg) if llm_names else None
    reports = []
    for name in cfg.sources:
        source = _source_for(cfg, name, traced, completer)
        reports.append(bkt.mastery_report(
            records, source, cfg.params, cfg.threshold, groups=groups,
            required_questions=bkt.LESSON_QUESTIONS if cfg.strict_lessons else None))
    gold = reports[-1]
    compared = reports[:-1]
    comparison = bkt.misclassification_comparison(compared[0], compared[1] if len(compared) > 1 else None, gold)
    out = Path(cfg.out)
    # the same source name may appear twice; keep the first per name
    unique = list({r.grading_source: r for r in reversed(reports)}.values())[::-1]
    bkt.write_mastery_csv(out / "mastery.csv", *unique)
    prov = provenance(cfg, completer.cache.digest() if completer and completer.cache else None)
    _write_json(out / "comparison.json", {"provenance": prov, "comparison": comparison})
    _write_json(out / "lesson_difficulty.json",
                {"provenance": prov, "median": cfg.median, "lessons": bkt.lesson_difficulty(unique, cfg.median)})
    summary = {k: v for k, v in comparison.items() if k.startswith("fraction") or k == "students"}
    if cfg.lesson:
        table = lesson_table(unique, cfg.lesson)
        _write_json(out / "lesson_table.json", {"provenance": prov, "lesson": cfg.lesson, "rows": table})
        header = ["user_id"] + [r.grading_source for r in unique]
        rows = [[row["user_id"]] + [f"{row[r.grading_source]:.6f}" for r in unique] for row in table]
        print(metrics.format_table(header, rows))
    print(json.dumps(summary, indent=2))
    return 0


def lesson_table(reports, lesson_id: str) -> list:
    per_source = [r.lesson(lesson_id) for r in reports]
    users = sorted(set().union(*per_source), key=lambda u: (not u.isdigit(), int(u) if u.isdigit() else 0, u))
    return [{"user_id": u, **{r.grading_source: s[u] for r, s in zip(reports, per_source) if u in s}}
            for u in users if all(u in s for s in per_source)]


def cmd_mastery(cfg: RunConfig) -> int:
    loaded = _load(cfg)
    source = cfg.sources[-1] if cfg.sources else "human"
    rollup = bkt.simple_mastery_rollup(loaded.records, source)
    _write_json(Path(cfg.out) / "mastery_rollup.json",
                {"provenance": provenance(cfg), "source": source, "rollup": rollup.to_dict()})
    print(json.dumps({"source": source, "lesson_mastery_rate": rollup.lesson_mastery_rate,
                      "students_with_skill_mastery": rollup.students_with_skill_mastery,
                      "students": rollup.students}, indent=2))
    return 0


COMMANDS = {
    "summarize": cmd_summarize,
    "filter-hard": cmd_filter_hard,
    "grade": cmd_grade,
    "evaluate": cmd_evaluate,
    "reliability": cmd_reliability,
    "bkt": cmd_bkt,
    "mastery": cmd_mastery,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig keys")
    common.add_argument("--data", help="answer log (.csv, .tsv or .jsonl)")
    common.add_argument("--day-first", dest="day_first", action="store_const", const=True,
                        help="timestamps are day/month/year")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--strict", action="store_const", const=True,
                        help="non-zero exit when degenerate statistics are reported")
    common.add_argument("--progress", action="store_const", const=True)
    common.add_argument("-v", "--verbose", action="store_true")

    llm_opts = argparse.ArgumentParser(add_help=False)
    llm_opts.add_argument("--model")
    llm_opts.add_argument("--endpoint")
    llm_opts.add_argument("--credential-env", dest="credential_env")
    llm_opts.add_argument("--timeout", type=float)
    llm_opts.add_argument("--cache-mode", dest="cache_mode", choices=[m.value for m in llm.CacheMode])
    llm_opts.add_argument("--cache", help="replay cache (.jsonl); reliability accepts a {run} placeholder")
    llm_opts.add_argument("--parallelism", type=int)
    llm_opts.add_argument("--cascade-llm", dest="cascade_llm", choices=[s.value for s in llm.Strategy])

    strategies = [s.value for s in cascade.GradingStrategyId]
    parser = argparse.ArgumentParser(prog="mathgrade", description="Grade open-response math answers and analyze mastery.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", parents=[common], help="dataset summary report")
    p.add_argument("--demographics")
    p = sub.add_parser("filter-hard", parents=[common], help="build the hard-to-grade subset")
    p.add_argument("--exclusions", help="lesson_id,question_number pairs to drop")
    p = sub.add_parser("grade", parents=[common, llm_opts], help="grade attempts with one strategy")
    p.add_argument("--strategy", choices=strategies)
    p = sub.add_parser("evaluate", parents=[common, llm_opts], help="metric table against human labels")
    p.add_argument("--strategies", help="comma-separated strategy ids")
    p = sub.add_parser("reliability", parents=[common, llm_opts], help="repeated-run agreement")
    p.add_argument("--strategy", choices=strategies)
    p.add_argument("--runs", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--seed", type=int)
    p = sub.add_parser("bkt", parents=[common, llm_opts], help="knowledge tracing mastery comparison")
    p.add_argument("--sources", help="compared source(s) then gold, e.g. naive_string,llm_cot,human")
    p.add_argument("--lesson", help="per-student score table for one lesson")
    p.add_argument("--threshold", type=float)
    p.add_argument("--strict-lessons", dest="strict_lessons", action="store_const", const=True,
                   help="only trace lessons with all 10 questions answered")
    p.add_argument("--median", choices=["mean", "lower"])
    for name in ("p_l0", "p_t", "p_s", "p_g"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    p = sub.add_parser("mastery", parents=[common], help="correct-rate mastery rollup")
    p.add_argument("--sources", help="grading source (default human)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, dataset.SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"mathgrade {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except llm.LlmError as exc:
        print(f"mathgrade {args.command}: model error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
