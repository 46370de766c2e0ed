import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> [title, passed, notes]
_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, [title, True, []])
    if report.failed or (report.when == "call" and report.skipped):
        entry[1] = False
    if report.when == "call":
        entry[2].extend(v for k, v in item.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, notes = _criteria[number]
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if notes:
            line += f"  ({'; '.join(notes)})"
        terminalreporter.write_line(line)
