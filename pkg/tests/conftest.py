import pytest

from msdci.tensor_core import make_rng

ACCEPTANCE_COUNT = 10
_acceptance: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def criterion():
    """Record an acceptance verdict, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        _acceptance[number] = (bool(ok), detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria (desk-scale training)")


def pytest_terminal_summary(terminalreporter):
    ran = [
        item for item in terminalreporter.stats.get("passed", [])
        + terminalreporter.stats.get("failed", [])
        if "test_acceptance" in item.nodeid
    ]
    if not ran and not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        ok, detail = _acceptance.get(n, (False, "not evaluated (errored or deselected)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
