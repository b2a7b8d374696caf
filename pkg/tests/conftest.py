"""Acceptance bookkeeping: tests marked ``criterion(n)`` are summarised one line per criterion."""

import pytest

_OUTCOMES: dict[int, list[tuple[str, bool]]] = {}
_DETAILS: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Attach a short measurement string to the criterion summary line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str):
        if marker is not None:
            _DETAILS.setdefault(marker.args[0], []).append(text)

    return add


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        name = item.name + (" [xfail]" if item.get_closest_marker("xfail") else "")
        _OUTCOMES.setdefault(marker.args[0], []).append((name, call.excinfo is None))


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        results = _OUTCOMES[n]
        ok = all(passed for _, passed in results)
        failed = [name for name, passed in results if not passed]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({len(results)} checks)"
        if failed:
            line += " failed: " + ", ".join(failed)
        if _DETAILS.get(n):
            line += " | " + "; ".join(_DETAILS[n])
        terminalreporter.write_line(line)
