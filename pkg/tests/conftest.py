import pytest

from mrpack.ir import ClusterSpec
from mrpack.search import RrsParams

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else rep.when
    _criteria[mark.args[0]] = ("PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        status, detail = _criteria.get(n, ("NOT RUN", ""))
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}".rstrip())


@pytest.fixture
def fast_rrs():
    return RrsParams(explore_samples=10, exploit_samples=20, total_budget=30, seed=0)


@pytest.fixture
def desk():
    return ClusterSpec.desk()
