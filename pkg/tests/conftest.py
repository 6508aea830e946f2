import contextlib
import time

import pytest

_CRITERIA: dict[int, str] = {}


@contextlib.contextmanager
def _record(number: int, title: str):
    t0 = time.perf_counter()
    details: list[str] = []
    try:
        yield details
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _CRITERIA[number] = (f"FAIL  criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) -- {msg}"
                             + "".join(f"; {d}" for d in details))
        print(_CRITERIA[number])
        raise
    extra = "; ".join(details)
    _CRITERIA[number] = (f"PASS  criterion {number}: {title} ({time.perf_counter() - t0:.1f}s)"
                         + (f" -- {extra}" if extra else ""))
    print(_CRITERIA[number])


@pytest.fixture
def criterion():
    """``with criterion(n, title) as notes:`` records a PASS/FAIL line for the summary."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
