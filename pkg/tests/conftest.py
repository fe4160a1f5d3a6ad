import pytest

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    The test calls ``verdict(key, detail)`` as it goes; the last detail wins.
    The status comes from the test outcome, so a failed assertion always
    prints FAIL.
    """
    store = {}

    def note(key: str, detail: str) -> None:
        store["key"], store["detail"] = key, detail

    yield note
    rep = getattr(request.node, "rep_call", None)
    if "key" in store:
        if rep is None or rep.skipped:
            status = "SKIP"
        else:
            status = "PASS" if rep.passed else "FAIL"
        ACCEPTANCE_LINES[store["key"]] = f"{status}  {store['key']}: {store['detail']}"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
