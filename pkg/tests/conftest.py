import numpy as np
import pytest

from prefalign.numerics import kernels, reset_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion, driven by the real outcomes
# --------------------------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def criterion(request):
    """Record a one-line detail string for ``test_criterion_<n>_*``."""
    n = int(request.node.name.split("_")[2])

    def note(detail: str) -> None:
        _CRITERIA.setdefault(n, {})["detail"] = detail

    return note


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    entry = _CRITERIA.setdefault(n, {})
    if report.when == "call" or report.outcome != "passed":
        if hasattr(report, "wasxfail"):
            entry["outcome"] = "passed" if report.outcome == "passed" else "failed"
            entry["xfail"] = True
        else:
            entry["outcome"] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "NOT RUN"}.get(e.get("outcome"), "FAIL")
        tag = " (known failure, see README)" if e.get("xfail") and verdict == "FAIL" else ""
        terminalreporter.write_line(f"criterion {n}: {verdict}{tag} - {e.get('detail', 'no detail recorded')}")
