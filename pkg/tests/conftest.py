"""Per-criterion PASS/FAIL lines for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n)`` are tallied; a criterion passes
only when every test carrying its number passed.
"""

import pytest

_OUTCOMES: dict[int, list[str]] = {}
_TITLES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    _TITLES.setdefault(n, marker.kwargs.get("title", ""))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _OUTCOMES.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        results = _OUTCOMES[n]
        if "failed" in results:
            verdict = "FAIL"
        elif all(r == "skipped" for r in results):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"CRITERION {n:>2} {verdict}  {_TITLES.get(n, '')}")
