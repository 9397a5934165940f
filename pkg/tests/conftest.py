import pytest

# criterion id -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store one acceptance verdict; the line is printed in the terminal summary."""
    def _record(cid: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[cid] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] {cid}: {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c.split()[0][1:])):
        passed, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {cid}: {detail}")
