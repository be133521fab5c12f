"""Collects ``criterion``-marked outcomes and prints one verdict line per criterion."""

_titles: dict[int, str] = {}
_nodes: dict[str, int] = {}
_failed: set[int] = set()
_seen: set[int] = set()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _titles[number] = title
            _nodes[item.nodeid] = number


def pytest_runtest_logreport(report):
    number = _nodes.get(report.nodeid)
    if number is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _seen.add(number)
        if not report.passed:
            _failed.add(number)


def pytest_terminal_summary(terminalreporter):
    if not _titles:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_titles):
        if number not in _seen:
            verdict = "NOT RUN"
        else:
            verdict = "FAIL" if number in _failed else "PASS"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict:<4}  {_titles[number]}")
