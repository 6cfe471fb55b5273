import pytest

# criterion number -> (passed, detail); filled by test_acceptance.py
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA, key=str):
        ok, name, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture
def criterion():
    def record(k, name, ok, detail):
        CRITERIA[k] = (bool(ok), name, detail)
        print(f"criterion {k} [{name}]: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return record
