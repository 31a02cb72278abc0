import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from eventsve.cli import main

CRITERIA = {
    1: "triangulation accuracy on scale targets",
    2: "noise-free project/triangulate round trip",
    3: "smoke features against scalar brute force",
    4: "fusion identity, pyramid round trip, idempotence",
    5: "segmentation oracle and determinism",
    6: "event pipeline oracle",
    7: "end-to-end separation height and size",
    8: "byte-identical artifact trees",
    9: "codec round trips",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_runtest_logreport(report):
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _outcomes.get(crit, "PASS")
        now = "FAIL" if report.failed else ("SKIP" if report.skipped else "PASS")
        _outcomes[crit] = "FAIL" if "FAIL" in (prev, now) else ("SKIP" if "SKIP" in (prev, now) else "PASS")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status = _outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n}: {status}  {CRITERIA[n]}")


def cli_run(out):
    """One full ``run`` through the command line; returns the printed report."""
    res = CliRunner().invoke(main, ["--out", str(out), "run"], catch_exceptions=False)
    assert res.exit_code == 0, res.output
    return json.loads(res.stdout)


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "a"
    report = cli_run(out)
    return Path(out), report
