import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(label, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label, title = marker.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if hasattr(report, "wasxfail"):
            status = "FAIL (expected, see decisions ledger)" if report.skipped else "PASS"
        elif report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            status = f"SKIP ({reason.removeprefix('Skipped: ')})"
        else:
            status = "PASS" if report.passed else "FAIL"
        _RESULTS.setdefault(label, []).append((title, item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_RESULTS, key=lambda s: (int(s.rstrip("abcdefgh")), s)):
        for title, name, status in _RESULTS[label]:
            terminalreporter.write_line(f"criterion {label:<3} {status:<6} {title} [{name}]")
