import pytest


def pytest_configure(config):
    config._acceptance_rows = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        verdict = "PASS" if report.passed else "FAIL"
        item.config._acceptance_rows.append((marker.args[0], verdict, detail))


def pytest_terminal_summary(terminalreporter, config):
    rows = sorted(config._acceptance_rows)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in rows:
        terminalreporter.write_line(f"{verdict} criterion {number:>2}: {detail}")
