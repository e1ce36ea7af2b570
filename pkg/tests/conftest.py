import pytest

RESULTS = pytest.StashKey[dict]()
NUM_CRITERIA = 8


def pytest_configure(config):
    config.stash[RESULTS] = {}


@pytest.fixture
def criterion(request):
    """record(n, passed, detail): one acceptance line, printed in the terminal summary."""
    def record(n: int, passed: bool, detail: str):
        request.config.stash[RESULTS][n] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    res = config.stash[RESULTS]
    if not res:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, NUM_CRITERIA + 1):
        if n in res:
            passed, detail = res[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN (deselected, or errored before measuring)")
