import pytest

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
    """Print and remember one PASS/FAIL line, then assert on it."""
    lines = request.config.stash[_VERDICTS]

    def record(name: str, ok: bool, detail: str):
        line = f"{name}: {'PASS' if ok else 'FAIL'} | {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_VERDICTS]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
