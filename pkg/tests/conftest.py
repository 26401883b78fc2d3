import pytest

VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number reported in the summary")
    config.stash[VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record ``(passed, detail)`` for the test's acceptance criterion and assert it."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    results = request.config.stash[VERDICTS]

    def record(passed: bool, detail: str):
        results[number] = (bool(passed), detail)
        assert passed, detail

    yield record
    results.setdefault(number, (False, "raised before reaching a verdict"))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(VERDICTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
