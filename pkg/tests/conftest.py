"""Shared test plumbing: the acceptance suite registers one pass/fail
line per release criterion and this hook prints them at the end of the
run."""

from contextlib import contextmanager

import pytest

ACCEPTANCE_RESULTS: dict[int, tuple[str, bool]] = {}


@pytest.fixture
def criterion():
    """Context manager: `with criterion(4, "LR schedule"): ...` records
    PASS when the block completes and FAIL when it raises."""

    @contextmanager
    def _criterion(num: int, desc: str):
        try:
            yield
        except BaseException:
            ACCEPTANCE_RESULTS[num] = (desc, False)
            raise
        ACCEPTANCE_RESULTS[num] = (desc, True)

    return _criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        desc, ok = ACCEPTANCE_RESULTS[num]
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {num:2d} [{verdict}] {desc}")
