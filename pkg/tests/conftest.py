import desk


def pytest_terminal_summary(terminalreporter):
    if desk.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(desk.RESULTS):
            terminalreporter.write_line(desk.RESULTS[k])
