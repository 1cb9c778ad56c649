"""Shared pytest plumbing: acceptance-criterion result lines."""

_criterion_lines = []


def record_criterion(num, description, passed, elapsed, budget):
    _criterion_lines.append(
        (num, f"criterion {num:2d} [{'PASS' if passed else 'FAIL'}] "
              f"{description} ({elapsed:.1f}s, budget {budget:.0f}s)")
    )


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
