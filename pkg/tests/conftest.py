import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config._acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config._acceptance_lines:
            terminalreporter.write_line(line)
