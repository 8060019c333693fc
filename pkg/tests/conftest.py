from __future__ import annotations

import time
from contextlib import contextmanager

import pytest

CRITERIA: list[tuple[str, str, str, float]] = []


@contextmanager
def _record(cid: str, title: str, limit_s: float):
    start = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - start
        assert elapsed < limit_s, f"took {elapsed:.2f}s, limit {limit_s}s"
        status = "PASS"
    except pytest.skip.Exception:
        status = "SKIP"
        raise
    finally:
        elapsed = time.perf_counter() - start
        line = (cid, status, title, elapsed)
        CRITERIA.append(line)
        print(f"{status} {cid} {title} ({elapsed:.2f}s)")


@pytest.fixture
def criterion():
    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, status, title, elapsed in sorted(CRITERIA, key=lambda c: int(c[0][1:])):
        terminalreporter.write_line(f"{status:4} {cid:3} {title} ({elapsed:.2f}s)")
