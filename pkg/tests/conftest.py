import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import LINES, NOTES  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(LINES):
        terminalreporter.write_line(LINES[number])
    for note in NOTES:
        terminalreporter.write_line(note)
