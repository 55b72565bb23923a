import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record an acceptance criterion outcome; printed in the terminal summary.

    Usage: ``verdict(n, title, passed, detail)``; the test still asserts."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n, title, passed, detail=""):
        store[n] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_VERDICTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        title, ok, detail = store[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
