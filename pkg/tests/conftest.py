import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS = pytest.StashKey[dict]()
_PREPARED = {}


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, ok, detail)`` for the end-of-run acceptance report."""
    results = request.config.stash[_RESULTS]

    def record(number, ok, detail=""):
        results[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def prepared(tag, **counts):
    """Session cache around ``experiment.prepare`` (seed 0, desk scale)."""
    from cpsls.harness.experiment import prepare

    key = (tag, tuple(sorted(counts.items())))
    if key not in _PREPARED:
        _PREPARED[key] = prepare(tag, 0, counts or None)
    return _PREPARED[key]
