import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict for the end-of-session summary."""

    def record(number, status, detail):
        line = f"criterion {number}: {status}  {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append((number, line))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, [])
    if rows:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(rows, key=lambda r: r[0]):
            terminalreporter.write_line(line)
