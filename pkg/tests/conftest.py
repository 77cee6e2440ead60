# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    order = lambda k: (int(str(k).rstrip("ab")), str(k))  # noqa: E731
    for number in sorted(ACCEPTANCE, key=order):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {str(number):>2}: {'PASS' if passed else 'FAIL'}  {detail}")
