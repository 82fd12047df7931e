import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, label = mark.args
    entry = _CRITERIA.setdefault(number, {"label": label, "status": "PASS", "note": ""})
    if hasattr(report, "wasxfail") and report.skipped:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
        entry["note"] = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
    elif report.failed:
        entry["status"] = "FAIL"
    note = getattr(item, "criterion_note", "")
    if note and report.when == "call":
        entry["note"] = f"{entry['note']}; {note}" if entry["note"] else note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        line = f"criterion {number:>2} {e['status']:<4} {e['label']}"
        if e["note"]:
            line += f"  [{e['note']}]"
        terminalreporter.write_line(line)
