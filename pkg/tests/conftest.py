"""Print one verdict line per acceptance criterion after the run."""

import re

_VERDICTS = {}
_PATTERN = re.compile(r"test_acceptance\.py::test_c(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        number, name = int(m.group(1)), m.group(2).replace("_", " ")
        detail = ""
        for key, value in report.user_properties:
            if key == "detail":
                detail = value
        _VERDICTS[number] = (name, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        name, verdict, detail = _VERDICTS[number]
        line = f"criterion {number:2d} {verdict}  {name}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
