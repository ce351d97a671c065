import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("lpa", max_examples=40, deadline=None)
settings.load_profile("lpa")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory):
    from lpa.training import synthetic_corpus

    path = tmp_path_factory.mktemp("corpus") / "synthetic.txt"
    path.write_bytes(synthetic_corpus(1_000_000, seed=0))
    return str(path)


@pytest.fixture(scope="session")
def small_corpus_file(tmp_path_factory):
    from lpa.training import synthetic_corpus

    path = tmp_path_factory.mktemp("small") / "small.txt"
    path.write_bytes(synthetic_corpus(60_000, seed=1))
    return str(path)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


def pytest_configure(config):
    os.environ.setdefault("LPA_THREADS", "1")
