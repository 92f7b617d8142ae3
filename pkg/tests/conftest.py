import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        _CRITERIA[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
                                    + (f" ({detail})" if detail else ""))
