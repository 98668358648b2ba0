import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance(request, capsys):
    """report(n, ok, detail): record one criterion line and echo it immediately."""
    def report(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash[_LINES].append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
