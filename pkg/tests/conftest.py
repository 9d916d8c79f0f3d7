import pytest

ACCEPTANCE = {}


@pytest.fixture
def record():
    def rec(n, title, passed, detail):
        ACCEPTANCE[n] = f"{'PASS' if passed else 'FAIL'}  criterion {n}: {title}  {detail}"
        print(ACCEPTANCE[n])
        return passed
    return rec


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
