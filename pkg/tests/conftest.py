import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line; it is echoed live and again in the run summary."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'} ({detail})"
        _VERDICTS.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance verdicts")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
