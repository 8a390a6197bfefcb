import re

_CRITERIA: dict[int, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        notes = [f"{k}={v}" for k, v in report.user_properties]
        _CRITERIA[n] = ("PASS" if report.passed else "FAIL", m.group(2), notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, name, notes = _CRITERIA[n]
        extra = ("  " + "; ".join(notes)) if notes else ""
        terminalreporter.write_line(f"criterion {n:2d} {name}: {status}{extra}")
