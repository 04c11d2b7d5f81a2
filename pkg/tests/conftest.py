import pytest

ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, name)`` is a context manager that records one PASS/FAIL
    line for acceptance criterion ``n``; an exception inside records FAIL.
    Call ``.note(text)`` on the yielded object to attach measured values."""
    from contextlib import contextmanager

    rows = request.config.stash.setdefault(ACCEPTANCE, {})

    class Line:
        def __init__(self):
            self.notes = []

        def note(self, text):
            self.notes.append(text)

    @contextmanager
    def record(n, name):
        line = Line()
        ok = False
        try:
            yield line
            ok = True
        finally:
            rows[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {name}" + (
                f" [{'; '.join(line.notes)}]" if line.notes else "")
            with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
                print("\n" + rows[n])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, {})
    if rows:
        terminalreporter.section("acceptance criteria")
        for n in sorted(rows):
            terminalreporter.write_line(rows[n])
