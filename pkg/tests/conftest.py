import os

RESULTS = []


def record_criterion(number: int, passed: bool, detail: str, seconds: float):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({seconds:.1f} s) {detail}"
    RESULTS.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(RESULTS):
        terminalreporter.write_line(line)


def pytest_configure(config):
    # one worker keeps the long acceptance run reproducible and bounded
    os.environ.setdefault("CAPSKIT_THREADS", "1")
