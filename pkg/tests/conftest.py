def pytest_configure(config):
    config.criteria_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "criteria_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
