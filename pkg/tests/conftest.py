def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import criteria_report
    except ImportError:
        return
    lines = criteria_report()
    if not lines:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
