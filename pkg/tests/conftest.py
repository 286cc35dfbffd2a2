import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Elementwise |a - n| <= atol + rtol * max(|a|, |n|)."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(np.abs(analytic - numeric) <= bound))


# Acceptance tests carry ``@pytest.mark.criterion(n, title)``; their outcomes are
# folded into one PASS/FAIL line per criterion in the terminal summary.
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion the test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "details": []})
    entry["ok"] = entry["ok"] and rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        lines = [ln for ln in rep.longreprtext.strip().splitlines() if ln.startswith("E ")]
        entry["details"].append((lines[0][1:].strip() if lines else rep.longreprtext.strip().splitlines()[-1])[:300])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n}: {status} - {e['title']}" + (f" [{detail}]" if detail else ""))
