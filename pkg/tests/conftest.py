"""Shared pytest wiring: collect acceptance verdict lines and echo them
in the terminal summary, where output capture cannot swallow them."""

verdict_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if verdict_lines:
        terminalreporter.section("acceptance checks")
        for line in verdict_lines:
            terminalreporter.write_line(line)
