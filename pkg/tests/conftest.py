"""Shared pytest plumbing: the acceptance summary block.

Acceptance tests record one line each through `note`; the hook below prints
them after the run so the pass/fail ledger survives output capture.
"""

acceptance_lines = []


def note(name: str, ok: bool, detail: str) -> None:
    acceptance_lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
