"""Shared pytest wiring: the acceptance suite prints a per-criterion line."""

import pytest

# criterion number -> short label, keyed by test-name prefix in
# test_acceptance.py (test_criterion_NN_*)
_CRITERIA = {
    1: "adjoint consistency (dot tests, 10 seeds per operator)",
    2: "solver correctness (analytic cases + exhaustive-support oracle)",
    3: "KKT-system residual at converged solutions",
    4: "gradient audit vs central finite differences",
    5: "support projectors idempotent and symmetric",
    6: "compressed-sensing recovery oracle and transition",
    7: "end-to-end training beats frozen random geometry",
    8: "image mean gap: exact baseline and trained < random",
    9: "two-shot advantage at mid-transition sparsity",
    10: "byte-identical reruns",
}

_RESULTS = {}


def _criterion_of(nodeid: str):
    if "test_acceptance" not in nodeid:
        return None
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return None
    try:
        return int(name.split("_")[2])
    except (IndexError, ValueError):
        return None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    num = _criterion_of(item.nodeid)
    if num is None:
        return
    if report.when == "setup" and report.outcome == "skipped":
        _RESULTS[num] = "SKIP"
    elif report.when == "call":
        _RESULTS[num] = "PASS" if report.outcome == "passed" else "FAIL"
    elif report.outcome == "failed":  # setup/teardown error
        _RESULTS[num] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        status = _RESULTS.get(num)
        if status is None:
            continue
        terminalreporter.write_line(
            f"criterion {num:2d}: {status:4s}  {_CRITERIA[num]}")
