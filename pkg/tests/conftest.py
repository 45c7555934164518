import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from factorplan.data import DatasetConfig, flatten, generate_dataset  # noqa: E402
from factorplan.experiments import build_vocab  # noqa: E402


@pytest.fixture(scope="session")
def corpus():
    """Six seeded scenes, one per scenario kind cycle, with expert snapshots."""
    return flatten(generate_dataset(DatasetConfig(count=6, seed=0)))


@pytest.fixture(scope="session")
def vocab16(corpus):
    return build_vocab(corpus, 16, 8)


ACCEPTANCE_LINES: dict = {}


def record_acceptance(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
