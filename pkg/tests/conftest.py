import json
import sys
from datetime import datetime
from pathlib import Path

import pytest

from mathgrade.dataset import AttemptRecord, Grade3, load_attempts, parse_lesson_id

DATA = Path(__file__).parent / "data"
# fixture generators double as the source of truth for recorded sessions
sys.path.insert(0, str(DATA))


@pytest.fixture(scope="session")
def synthetic_records():
    result = load_attempts(DATA / "synthetic_attempts.csv")
    assert result.ok
    return result.records


@pytest.fixture(scope="session")
def synthetic_expected():
    return json.loads((DATA / "synthetic_expected.json").read_text())


def make_attempt(student="2", expected="2", question="What is 1 + 1?", human="correct", model="correct",
                 lesson="G6.N1.2.2.1", qn=1, user="1", minute=0):
    return AttemptRecord(parse_lesson_id(lesson), qn, question, expected, student, Grade3(model),
                         Grade3(human), datetime(2024, 1, 9, 8, minute), user)


# --- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
