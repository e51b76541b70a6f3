def pytest_configure(config):
    config.acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter, config):
    verdicts = getattr(config, "acceptance_verdicts", [])
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(verdicts, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
