import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """Record and print one acceptance verdict line, then assert it."""
    def _report(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"acceptance #{number:<2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
        request.config.stash[ACCEPTANCE].append((number, line))
        print(line)
        assert ok, line
    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(ACCEPTANCE, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
