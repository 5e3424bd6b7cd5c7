import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def emit(number, title, checks, elapsed, limit):
        checks = list(checks) + [(f"runtime {elapsed:.1f}s < {limit}s", elapsed < limit)]
        ok = all(c for _, c in checks)
        detail = "; ".join(f"{'ok' if c else 'FAILED'}: {text}" for text, c in checks)
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
