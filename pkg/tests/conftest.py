"""Shared pytest plumbing for the acceptance suite.

test_acceptance records one verdict line per criterion; this hook replays
them at the end of the run so every criterion gets exactly one visible
pass/fail line regardless of output capturing.
"""

CRITERION_LINES: list[tuple[int, str]] = []


def record_criterion(num: int, name: str, passed: bool, detail: str) -> None:
    line = f"CRITERION {num:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    CRITERION_LINES.append((num, line))
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _num, line in sorted(CRITERION_LINES):
        terminalreporter.write_line(line)
