"""Shared fixtures plus the acceptance summary.

Tests named test_criterion_NN_* report one PASS/FAIL line each at the end
of the run, so the gate's verdict is readable without scrolling."""

import pytest

_RESULTS = {}


@pytest.fixture
def note(request):
    """Attach a short measurement note to the criterion's summary line."""

    def _note(text):
        request.node.user_properties.append(("note", text))

    return _note


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1].split("[")[0]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed or report.skipped:
        if name not in _RESULTS or report.when == "call":
            status = ("PASS" if report.passed
                      else "SKIP" if report.skipped else "FAIL")
            _RESULTS[name] = (status, dict(report.user_properties).get("note"))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        status, text = _RESULTS[name]
        parts = name.split("_")
        line = f"criterion {int(parts[2]):2d} [{status}] {' '.join(parts[3:])}"
        if text:
            line += f" ({text})"
        terminalreporter.write_line(line)
