"""Shared reporting: collected acceptance lines survive output capture."""

_acceptance_lines: list[str] = []


def record_acceptance_line(line: str) -> None:
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
        _acceptance_lines.clear()
