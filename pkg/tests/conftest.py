"""Acceptance summary: one PASS/FAIL line per criterion at the end of the run."""

from collections import defaultdict

CRITERIA = {
    1: "gradient oracle",
    2: "attention oracles",
    3: "stop-gradient semantics",
    4: "hint invariance",
    5: "generator calibration",
    6: "structural invariants",
    7: "metric correctness",
    8: "end-to-end learnability",
    9: "directional ablation",
    10: "reproducibility",
}

_outcomes: dict[int, list[str]] = defaultdict(list)
_notes: dict[int, list[str]] = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    n = props.get("criterion")
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome)
    if report.when == "call":
        _notes[n].extend(v for k, v in report.user_properties if k == "note")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        outcomes = _outcomes.get(n)
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIP"
        tr.write_line(f"criterion {n:2d} {status:7s} {name}")
        for note in _notes.get(n, []):
            tr.write_line(f"             {note}")
