import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], {"title": m.args[1], "nodes": {}})
            _CRITERIA[m.args[0]]["nodes"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid in entry["nodes"]:
            # a failure in any phase sticks; a pass only counts from the call phase
            if report.failed:
                entry["nodes"][report.nodeid] = "FAIL"
            elif report.skipped:
                entry["nodes"][report.nodeid] = entry["nodes"][report.nodeid] or "SKIP"
            elif report.when == "call" and entry["nodes"][report.nodeid] is None:
                entry["nodes"][report.nodeid] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        states = set(entry["nodes"].values())
        if "FAIL" in states:
            verdict = "FAIL"
        elif states == {"PASS"}:
            verdict = "PASS"
        else:
            verdict = "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {entry['title']}")
