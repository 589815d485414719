import acceptance_checks


def pytest_terminal_summary(terminalreporter):
    if acceptance_checks.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_checks.REPORT:
            terminalreporter.write_line(line)
