"""Shared small corpora and the acceptance-criteria summary.

Building corpora is cheap; encoding is what costs time.
"""
import pytest
from hypothesis import settings

from segnn.synth import SceneSpec, build_corpus

# reproducible property runs: the same examples every time
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

CRITERIA = pytest.StashKey()


def pytest_configure(config):
    config.stash[CRITERIA] = []


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(SceneSpec(), 20, seed=7)


@pytest.fixture
def criterion(request):
    """``criterion(name, passed, detail)`` records one acceptance line for the final summary."""

    def record(name, passed, detail):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        request.config.stash[CRITERIA].append(line)
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
