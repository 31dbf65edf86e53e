from __future__ import annotations

from pathlib import Path

import pytest

from treerag.prompts import TemplateStore

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def templates() -> TemplateStore:
    return TemplateStore()


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# -- acceptance summary -------------------------------------------------------
# Tests marked ``criterion("...")`` get one PASS/FAIL/SKIP line each at the
# end of the run.

_CRITERIA: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if hasattr(report, "wasxfail"):
            status = "FAIL (non-gating)"
        else:
            status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA.append((status, marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    # parametrized criteria report once: FAIL beats SKIP beats PASS
    rank = {"FAIL": 3, "FAIL (non-gating)": 2, "SKIP": 1, "PASS": 0}
    merged: dict[str, list[str]] = {}
    for status, name in _CRITERIA:
        merged.setdefault(name, []).append(status)
    terminalreporter.section("acceptance criteria")
    for name, statuses in merged.items():
        worst = max(statuses, key=rank.__getitem__)
        cases = f" [{len(statuses)} cases]" if len(statuses) > 1 else ""
        terminalreporter.write_line(f"{worst} {name}{cases}")
