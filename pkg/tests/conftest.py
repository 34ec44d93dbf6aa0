import re

import pytest

CRITERIA = {
    1: "acyclicity suite",
    2: "closed-form ridge vs gradient descent",
    3: "gradient integrity",
    4: "oracle equivalence",
    5: "end-to-end desk-scale run",
    6: "meta-learning hygiene",
    7: "determinism",
}

_outcomes: dict[int, list[bool]] = {}
_details: dict[int, list[str]] = {}
_PATTERN = re.compile(r"test_criterion_(\d+)")


def _criterion(name: str) -> int | None:
    m = _PATTERN.search(name)
    return int(m.group(1)) if m else None


@pytest.fixture
def record(request):
    """Attach a measured value to the acceptance line of the running criterion."""
    n = _criterion(request.node.name)

    def _record(text: str) -> None:
        _details.setdefault(n, []).append(text)

    return _record


def pytest_runtest_logreport(report):
    n = _criterion(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        _outcomes.setdefault(n, []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            status = "NOT RUN"
        else:
            status = "PASS" if all(_outcomes[n]) else "FAIL"
        detail = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n} ({name}): {status}" + (f" | {detail}" if detail else ""))
