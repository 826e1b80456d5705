"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(config, items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            why = "slow suite" if item.get_closest_marker("slow") else "deselected"
            _RESULTS.setdefault(m.args[0], [m.args[1], "NOT RUN", why])


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line."""
    def note(text):
        request.node.user_properties.append(("detail", str(text)))
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        notes = [v for k, v in item.user_properties if k == "detail"]
        if rep.skipped and isinstance(rep.longrepr, tuple):
            notes.append(rep.longrepr[2].removeprefix("Skipped: "))
        elif rep.failed:
            notes.append(rep.longrepr.reprcrash.message.splitlines()[0]
                         if hasattr(rep.longrepr, "reprcrash") else "error")
        _RESULTS[m.args[0]] = [m.args[1], status, "; ".join(notes)]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, note = _RESULTS[n]
        terminalreporter.write_line(f"[criterion {n}] {status} {title}" + (f": {note}" if note else ""))
