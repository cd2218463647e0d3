import pytest

_RESULTS = []


class _Recorder:
    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number, ok, detail=""):
        line = f"[criterion {number:>2}] {'PASS' if ok else 'FAIL'}  {detail}"
        _RESULTS.append(line)
        with self.capsys.disabled():
            print("\n" + line)
        return ok


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; the test still asserts on its own."""
    return _Recorder(capsys)


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS):
            terminalreporter.write_line(line)
