import numpy as np
import pytest

from cecfair.model import MLPModel


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def linear_model(w, b=0.0):
    w = np.asarray(w, dtype=np.float64)
    return MLPModel([w.size, 1], [w.reshape(-1, 1)], [np.array([b], dtype=np.float64)], dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------------ acceptance summary

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed")):
        return
    n = int(mark.args[0])
    detail = "; ".join(str(v) for k, v in rep.user_properties if k == "detail")
    if rep.outcome == "passed":
        status = "PASS"
    elif "XPASS(strict)" in str(rep.longrepr):
        status = "PASS"
        detail = (detail + "; " if detail else "") + "xfail marker is stale"
    else:
        status = "FAIL"
        if hasattr(rep, "wasxfail"):
            detail = (detail + "; " if detail else "") + "expected failure: " + rep.wasxfail
    _CRITERIA[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        tr.write_line(f"criterion {n:2d}: {status}" + (f"  ({detail})" if detail else ""))
