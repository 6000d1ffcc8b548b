import contextlib

ACCEPTANCE = []


@contextlib.contextmanager
def criterion(name):
    """Record PASS/FAIL for an acceptance criterion, re-raising any failure."""
    try:
        yield
    except BaseException as exc:
        ACCEPTANCE.append(f"FAIL  {name}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        raise
    ACCEPTANCE.append(f"PASS  {name}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
