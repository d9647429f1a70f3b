import time

import pytest

_CRITERIA: dict[int, tuple[bool, str]] = {}


class CriterionReport:
    """Collects one verdict per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.start = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.start

    def record(self, ok, detail):
        _CRITERIA[self.number] = (bool(ok), f"{self.title}: {detail} [{self.elapsed:.1f}s]")
        return ok


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    report = CriterionReport(*marker.args)
    yield report
    if report.number not in _CRITERIA:
        # the test raised before reaching its verdict
        _CRITERIA[report.number] = (False, f"{report.title}: error before verdict [{report.elapsed:.1f}s]")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, line = _CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}  {line}")
