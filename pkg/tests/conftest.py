"""Shared pytest plumbing: a verdict table for the acceptance checklist.

Each acceptance test records one line before asserting, so the terminal
summary always shows every criterion's measured numbers, pass or fail.
"""

_acceptance_lines: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    verdict = "PASS" if passed else "FAIL"
    _acceptance_lines.append(f"criterion {number:2d} {verdict} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in sorted(_acceptance_lines):
        terminalreporter.write_line(line)
