import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None, derandomize=True)
settings.load_profile("default")

_CRITERIA: list[tuple[str, bool, str]] = []


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion."""

    def __call__(self, name: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok


@pytest.fixture(scope="session")
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 24-sample corpus (16/4/4) at 32 x 32 for fast pipeline tests."""
    from cfpformer.data import generate

    out = tmp_path_factory.mktemp("small_corpus")
    return generate(out, 24, size=32, seed=3, splits=(16, 4, 4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
