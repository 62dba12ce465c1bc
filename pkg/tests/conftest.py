"""Per-criterion PASS/FAIL summary for tests marked ``acceptance``."""

import pytest

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): numbered acceptance criterion")


@pytest.fixture
def measured(request):
    """Dict of measured values shown next to the criterion's summary line."""
    values: dict = {}
    request.node.user_properties.append(("measured", values))
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    cid, title = mark.args
    entry = _RESULTS.setdefault(cid, {"title": title, "passed": True, "notes": [], "ran": False})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["ran"] = True
        failed = rep.failed or hasattr(rep, "wasxfail") or rep.skipped
        entry["passed"] = entry["passed"] and not failed
        if hasattr(rep, "wasxfail"):
            entry["notes"].append("expected failure")
        for key, values in item.user_properties:
            if key == "measured":
                entry["notes"].extend(f"{k}={_fmt(v)}" for k, v in values.items())


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda c: int(c[1:])):
        e = _RESULTS[cid]
        if not e["ran"]:
            continue
        status = "PASS" if e["passed"] else "FAIL"
        notes = " ".join(e["notes"])
        terminalreporter.write_line(f"{status} {cid} {e['title']}" + (f" | {notes}" if notes else ""))
