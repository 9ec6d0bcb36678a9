import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

DATA = os.path.join(os.path.dirname(__file__), "data")

# criterion number -> (title, outcome, detail)
_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.fixture
def detail(request):
    """Callable recording measured values for the acceptance summary line."""
    notes = []
    request.node._detail = notes
    return lambda text: notes.append(str(text))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    n, title = m.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.outcome == "passed" else ("SKIP" if rep.outcome == "skipped" else "FAIL")
        _ACCEPTANCE[n] = (title, status, "; ".join(getattr(item, "_detail", [])))
        line = f"[acceptance] criterion {n} {status}: {title}"
        if _ACCEPTANCE[n][2]:
            line += f" ({_ACCEPTANCE[n][2]})"
        # visible in the live output as soon as the criterion finishes
        tr = item.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, status, det = _ACCEPTANCE[n]
        terminalreporter.line(f"criterion {n}: {status}  {title}" + (f"  [{det}]" if det else ""))
