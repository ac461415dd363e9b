import pytest

_ACCEPTANCE: list[str] = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""

    def note(self, detail):
        self.detail = detail


@pytest.fixture
def criterion(request):
    """Records one PASS/FAIL line for the acceptance summary."""
    c = _Criterion(request.node.name.removeprefix("test_"))
    yield c
    rep = getattr(request.node, "rep_call", None)
    status = "PASS" if rep is not None and rep.passed else "FAIL"
    line = f"{status}  {c.name}" + (f"  ({c.detail})" if c.detail else "")
    _ACCEPTANCE.append(line)
    print(line)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
