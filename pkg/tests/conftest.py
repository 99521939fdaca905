import contextlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> {"title": str, "parts": [(name, ok, detail)]}
_CRITERIA: dict = {}


@contextlib.contextmanager
def _record(number: int, title: str, part: str = ""):
    slot = _CRITERIA.setdefault(number, {"title": title, "parts": []})
    detail: dict = {}
    try:
        yield detail
    except BaseException as exc:
        detail.setdefault("error", f"{type(exc).__name__}: {str(exc).splitlines()[0][:120]}"
                          if str(exc) else type(exc).__name__)
        slot["parts"].append((part, False, detail))
        raise
    slot["parts"].append((part, True, detail))


@pytest.fixture
def criterion():
    """Context manager that records one part of an acceptance criterion."""
    return _record


def _fmt(detail: dict) -> str:
    return ", ".join(f"{k}={v}" for k, v in detail.items())


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        slot = _CRITERIA[number]
        ok = all(p[1] for p in slot["parts"])
        parts = "; ".join(f"{name or 'result'}: {'ok' if good else 'FAILED'}"
                          + (f" ({_fmt(d)})" if d else "")
                          for name, good, d in slot["parts"])
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number} {slot['title']}: {parts}")
