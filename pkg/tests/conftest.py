import numpy as np
import pytest

from clusteremb import data as D
from clusteremb import trainer as Tr

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool | None, detail: str = ""):
    """Register one acceptance line; ``None`` marks a skipped criterion."""
    status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def toy_corpus():
    raw = D.synthetic_topics(400, 2, seed=1)
    train_raw, dev_raw = D.split_dev(raw, 80, 0)
    test_raw = D.synthetic_topics(80, 2, seed=2)
    return Tr.corpus_from_raw(train_raw, dev_raw, test_raw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
