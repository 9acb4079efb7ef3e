import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns the boolean so tests can assert on it."""
    lines = request.config.stash[_VERDICTS]

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
