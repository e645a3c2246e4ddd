import pytest

RESULTS: list[str] = []


def record(line: str) -> None:
    """Keep an acceptance verdict line for the end-of-run summary."""
    print(line)
    RESULTS.append(line)


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
