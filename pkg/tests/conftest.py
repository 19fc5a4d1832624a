"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import re

_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or report.when == "call":
        prev = _results.get(key)
        if prev is None or prev[0]:
            detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
            _results[key] = (not failed, detail or (report.longreprtext.splitlines()[-1] if failed else ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), (ok, detail) in sorted(_results.items()):
        line = f"criterion {num:2d} {name.replace('_', ' '):<28} {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
