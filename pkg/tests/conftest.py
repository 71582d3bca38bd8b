from __future__ import annotations

from pathlib import Path

import pytest

from chainmem.backend import MockBackend
from chainmem.episodes import Episode, load_dataset

DATA = Path(__file__).parent / "data"
CORPUS = DATA / "corpus"


@pytest.fixture(scope="session")
def corpus_dir() -> Path:
    return CORPUS


@pytest.fixture(scope="session")
def episodes() -> list[Episode]:
    return load_dataset(CORPUS / "episodes.jsonl", CORPUS)


@pytest.fixture(scope="session")
def annotated_episodes() -> list[Episode]:
    return load_dataset(CORPUS / "episodes_annotated.jsonl", CORPUS)


@pytest.fixture
def eval_mock() -> MockBackend:
    return MockBackend.from_file(CORPUS / "eval_script.jsonl")


@pytest.fixture
def annotate_mock() -> MockBackend:
    return MockBackend.from_file(CORPUS / "annotate_script.jsonl")


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
