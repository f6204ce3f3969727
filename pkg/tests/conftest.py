import re
from collections import OrderedDict

LABELS = {
    "1": "Gaussian merge oracle",
    "2": "coreset properties",
    "3": "replay statistics",
    "4": "metric oracles",
    "5": "memory accounting anchors",
    "6": "numerical gradient and flow checks",
    "7": "forgetting ordering (finetune vs replay)",
    "8": "memory-bank stability",
    "9": "localization sanity",
    "desk": "desk suite within 20 minutes",
}

_outcomes = OrderedDict()


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+|desk)_", report.nodeid)
    if not m:
        return
    if report.when == "call" or report.outcome != "passed":
        ok = report.outcome == "passed"
        key = m.group(1)
        _outcomes[key] = _outcomes.get(key, True) and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key, ok in _outcomes.items():
        name = f"criterion {key}" if key.isdigit() else key
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {LABELS.get(key, '')}")
