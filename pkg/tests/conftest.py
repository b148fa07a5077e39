ACCEPTANCE_LINES = []


def pytest_runtest_logreport(report):
    if report.when == "call":
        ACCEPTANCE_LINES.extend(ln for ln in report.capstdout.splitlines() if ln.startswith("ACCEPTANCE"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
