import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: dict[str, tuple[str, str]] = {}


def record_criterion(name: str, outcome: str, detail: str = "") -> None:
    _CRITERIA[name] = (outcome, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[name]
        line = f"{name}: {outcome}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
