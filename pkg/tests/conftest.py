import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    failed = report.failed or hasattr(report, "wasxfail")
    if report.when == "call" or failed:
        entry = _CRITERIA.setdefault(n, {"name": item.name, "ok": True, "detail": ""})
        if failed or report.skipped:
            entry["ok"] = False
        details = [v for k, v in item.user_properties if k == "detail"]
        if hasattr(report, "wasxfail"):
            details.append("expected failure: " + report.wasxfail.removeprefix("reason: "))
        elif report.failed and not details:
            details.append(f"failed during {report.when}")
        entry["detail"] = "; ".join(details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = f" ({e['detail']})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {n}: {status} {e['name']}{detail}")
