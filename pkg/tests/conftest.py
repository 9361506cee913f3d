"""Collects acceptance outcomes and prints one line per criterion after the run."""

import time
from contextlib import contextmanager

import pytest

RESULTS = {}


@pytest.fixture
def criterion():
    """``with criterion(n, title, budget_s):`` records pass/fail, elapsed time and details."""

    @contextmanager
    def run(number, title, budget=None):
        notes = []
        start = time.perf_counter()
        ok = False
        try:
            yield notes
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed > budget:
                notes.append(f"over time budget {budget:.0f}s")
                raise AssertionError(f"criterion {number} took {elapsed:.1f}s, budget {budget:.0f}s")
            ok = True
        finally:
            RESULTS[number] = (ok, title, time.perf_counter() - start, notes)

    return run


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, elapsed, notes = RESULTS[number]
        extra = f" [{'; '.join(notes)}]" if notes else ""
        tr.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f}s){extra}")
