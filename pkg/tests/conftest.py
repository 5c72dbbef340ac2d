import time

import pytest

_ROWS = []


class _Criterion:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self):
        self.t0 = time.perf_counter()

    def __call__(self, name, passed, detail):
        _ROWS.append((name, bool(passed), detail, time.perf_counter() - self.t0))
        return bool(passed)


@pytest.fixture
def criterion():
    return _Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _ROWS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail, seconds in sorted(_ROWS, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}")
