import pytest

# (number, title) -> (outcome, detail)
ACCEPTANCE: dict[tuple[int, str], tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if not rep.passed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
        ACCEPTANCE[tuple(marker.args)] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (status, detail) in sorted(ACCEPTANCE.items()):
        terminalreporter.write_line(f"[{status}] criterion {number}: {title} | {detail}")
