import pytest

# criterion number -> (title, [passed flags of every test carrying it])
_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _, flags = _results.setdefault(number, (title, []))
    if report.when == "call" or (report.when == "setup" and not report.passed):
        flags.append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, flags = _results[number]
        status = "PASS" if flags and all(flags) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
