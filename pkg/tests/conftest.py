import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
