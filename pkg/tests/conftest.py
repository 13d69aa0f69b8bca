"""Shared pytest hooks: a one-line verdict per acceptance criterion."""

import re

_OUTCOMES: dict[str, str] = {}
_CRITERION = re.compile(r"::test_(a\d)_")


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _OUTCOMES[key] = "FAIL"
    elif report.when == "call":
        _OUTCOMES.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    from tests import acceptance_log

    terminalreporter.section("acceptance criteria")
    for key in sorted(_OUTCOMES, key=lambda k: int(k[1:])):
        detail = acceptance_log.DETAILS.get(key, "")
        terminalreporter.write_line(f"{key} {_OUTCOMES[key]}  {detail}".rstrip())
