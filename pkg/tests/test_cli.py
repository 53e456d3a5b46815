import json
import subprocess
import sys

import pytest

import make_replay
from conftest import DATA
from mathgrade import cli
from mathgrade.dataset import write_attempts

SYNTH = str(DATA / "synthetic_attempts.csv")


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path)])


def read_json(path):
    return json.loads(path.read_text())


def test_summarize(tmp_path, synthetic_expected, capsys):
    assert run(tmp_path, "summarize", "--data", SYNTH) == 0
    out = read_json(tmp_path / "summary.json")
    assert out["summary"] == synthetic_expected["summary"]
    assert set(out["provenance"]) == {"tool_version", "config_hash", "dataset_hash", "cache_hash"}
    assert '"total_answers": 200' in capsys.readouterr().out


def test_filter_hard(tmp_path, synthetic_expected):
    ex = str(DATA / "synthetic_exclusions.txt")
    assert run(tmp_path, "filter-hard", "--data", SYNTH, "--exclusions", ex) == 0
    counts = read_json(tmp_path / "filter_report.json")["counts"]
    assert counts["hard_records"] == synthetic_expected["hard_subset"]["with_exclusions"]
    assert len((tmp_path / "ammore_hard.csv").read_text().splitlines()) == 1 + counts["hard_records"]


def test_grade_and_evaluate_rule_strategies(tmp_path):
    assert run(tmp_path, "grade", "--data", SYNTH, "--strategy", "naive_string") == 0
    assert len((tmp_path / "graded_naive_string.csv").read_text().splitlines()) == 1 + 180
    assert run(tmp_path, "evaluate", "--data", SYNTH, "--strategies", "naive_string,text_processing") == 0
    report = read_json(tmp_path / "evaluation.json")["report"]
    assert report["naive_string"]["n"] == 180
    assert "Prediction" in (tmp_path / "evaluation.txt").read_text()


def test_strict_flags_degenerate_metrics(tmp_path):
    hard = tmp_path / "hard"
    assert run(hard, "filter-hard", "--data", SYNTH) == 0
    # naive matching never accepts a hard row, so its correct-class precision is undefined
    assert run(tmp_path, "evaluate", "--data", str(hard / "ammore_hard.csv"),
               "--strategies", "naive_string", "--strict") == 3


def test_reliability_replay_is_deterministic(tmp_path):
    data = tmp_path / "items.csv"
    write_attempts(data, make_replay.reliability_items())
    cache = str(DATA / "reliability" / "run_{run}.jsonl")
    args = ["reliability", "--data", str(data), "--strategy", "llm_zero_shot", "--runs", "3",
            "--items", "20", "--cache-mode", "replay", "--cache", cache]
    outs = []
    for parallelism in ("1", "4"):
        out = tmp_path / f"p{parallelism}"
        assert cli.main(args + ["--parallelism", parallelism, "--out", str(out)]) == 0
        outs.append(read_json(out / "reliability.json")["report"])
    assert outs[0] == outs[1]
    assert outs[0]["n_items"] == 20 and len(outs[0]["per_run_fleiss"]) == 3


def test_bkt_and_mastery(tmp_path):
    assert run(tmp_path, "bkt", "--data", SYNTH, "--sources", "naive_string,text_processing,human",
               "--lesson", "G9.N5.2.1.1") == 0
    comparison = read_json(tmp_path / "comparison.json")["comparison"]
    assert comparison["students"] == 23
    assert (tmp_path / "mastery.csv").is_file() and (tmp_path / "lesson_table.json").is_file()
    assert run(tmp_path, "mastery", "--data", SYNTH) == 0
    rollup = read_json(tmp_path / "mastery_rollup.json")["rollup"]
    assert rollup["students"] == 23


def test_missing_file_exits_2(tmp_path, capsys):
    assert run(tmp_path, "summarize", "--data", str(tmp_path / "nope.csv")) == 2
    assert "not found" in capsys.readouterr().err


def test_single_run_is_a_usage_error(tmp_path):
    assert run(tmp_path, "reliability", "--data", SYNTH, "--runs", "1") == 2


def test_replay_needs_a_cache(tmp_path):
    assert run(tmp_path, "grade", "--data", SYNTH, "--strategy", "llm_cot", "--cache-mode", "replay") == 2


def test_live_mode_needs_a_credential(tmp_path, monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    assert run(tmp_path, "grade", "--data", SYNTH, "--strategy", "llm_zero_shot") == 2


def test_cache_miss_is_a_model_error_per_row(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(tmp_path, "grade", "--data", SYNTH, "--strategy", "llm_zero_shot",
               "--cache-mode", "replay", "--cache", str(empty)) == 0
    rows = (tmp_path / "graded_llm_zero_shot.csv").read_text().splitlines()
    assert all(r.endswith(",1") for r in rows[1:])


def test_row_errors_exit_1(tmp_path):
    bad = tmp_path / "bad.csv"
    lines = (DATA / "synthetic_attempts.csv").read_text().splitlines()
    bad.write_text("\n".join(lines[:5] + [lines[5].replace(",other,other,", ",other,maybe,", 1)]) + "\n")
    assert run(tmp_path, "summarize", "--data", str(bad)) == 1


def test_config_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"threshold": 0.8, "runs": 4}))
    args = cli.build_parser().parse_args(["bkt", "--config", str(conf), "--threshold", "0.7"])
    cfg = cli.build_config(args, environ={"MATHGRADE_THRESHOLD": "0.6", "MATHGRADE_SEED": "9"})
    assert (cfg.threshold, cfg.runs, cfg.seed) == (0.7, 4, 9)
    conf.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(cli.UsageError):
        cli.build_config(args, environ={})


def test_sampling_is_seeded(synthetic_records):
    a = cli.sample_items(synthetic_records, 10, seed=1)
    assert a == cli.sample_items(synthetic_records, 10, seed=1)
    assert a != cli.sample_items(synthetic_records, 10, seed=2)


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mathgrade.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in cli.COMMANDS:
        assert name in out.stdout
