def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance pass/fail lines even when their tests pass."""
    try:
        from test_acceptance import REPORT
    except Exception:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
