from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# number -> {"title", "limit", "ok", "seen", "seconds"}
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(number, title, limit=None): acceptance criterion covered by the test; "
        "limit is the wall-clock budget in seconds for all of its tests together",
    )


def _entry(marker) -> dict:
    number, title = marker.args[:2]
    limit = marker.args[2] if len(marker.args) > 2 else marker.kwargs.get("limit")
    return _criteria.setdefault(number, {"title": title, "limit": limit, "ok": True, "seen": False, "seconds": 0.0})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _entry(marker)
    if report.when in ("setup", "call"):
        entry["seconds"] += report.duration
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["seen"] = True
        entry["ok"] = entry["ok"] and report.outcome == "passed"


def _over_time(entry: dict) -> bool:
    return entry["limit"] is not None and entry["seconds"] > entry["limit"]


def pytest_sessionfinish(session, exitstatus):
    # a criterion whose tests pass but blow the time budget still fails the run
    if exitstatus == pytest.ExitCode.OK and any(_over_time(e) for e in _criteria.values() if e["seen"]):
        session.exitstatus = pytest.ExitCode.TESTS_FAILED


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        if not e["seen"]:
            status = "NOT RUN"
        elif e["ok"] and not _over_time(e):
            status = "PASS"
        else:
            status = "FAIL"
        budget = f" / {e['limit']:g}s" if e["limit"] is not None else ""
        note = " (over time budget)" if e["seen"] and e["ok"] and _over_time(e) else ""
        terminalreporter.write_line(
            f"criterion {number:>2}: {status:<7} {e['seconds']:8.2f}s{budget:<8}  {e['title']}{note}"
        )


@pytest.fixture
def toy_dir():
    return FIXTURES / "toy"
