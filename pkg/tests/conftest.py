import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_results: dict = {}


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results[report.nodeid] = (report.outcome, report.duration)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for nodeid in sorted(_acceptance_results):
        outcome, duration = _acceptance_results[nodeid]
        name = nodeid.split("::")[-1]
        label = name.replace("test_", "", 1).replace("_", " ")
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {label}  ({duration:.1f}s)")


def finite_diff_check(make_loss, params, rng, n_entries=10, h=1e-5, floor=1e-4):
    """Central finite differences on random parameter entries vs the
    analytic gradient of a scalar loss (64-bit). Returns the worst
    relative error, using an absolute floor so structurally-zero
    gradients compare against FD noise sanely."""
    for p in params:
        p.grad = None
    make_loss().backward()
    worst = 0.0
    for p in params:
        g = p.grad
        assert g is not None, "parameter did not receive a gradient"
        for _ in range(n_entries):
            idx = tuple(int(rng.integers(0, d)) for d in p.data.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            lp = float(make_loss().data)
            p.data[idx] = old - h
            lm = float(make_loss().data)
            p.data[idx] = old
            num = (lp - lm) / (2.0 * h)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), floor))
    for p in params:
        p.grad = None
    return worst
