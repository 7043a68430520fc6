import pytest

_RESULTS: dict[int, str] = {}


@pytest.fixture
def accept(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _RESULTS[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[k])
