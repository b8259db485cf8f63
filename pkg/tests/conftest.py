import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


class _Criterion:
    def __init__(self, name):
        self.name = name

    def check(self, ok: bool, detail: str) -> None:
        """Record and print one PASS/FAIL line, then fail the test if ``ok`` is false."""
        ok = bool(ok)
        _RESULTS[self.name] = (ok, detail)
        print(f"\n{self.name} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
        assert ok, f"{self.name}: {detail}"


@pytest.fixture
def criterion(request):
    return _Criterion(request.node.originalname.split("_")[1].upper())


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS, key=lambda k: int(k[1:])):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
