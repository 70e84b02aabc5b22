import re

CRITERIA = {
    1: "gradient correctness against central differences",
    2: "kernel algebra",
    3: "KRR oracle",
    4: "desk-scale condensation quality",
    5: "Cora reproduction",
    6: "ablation and baseline ordering",
    7: "cross-kernel scaling",
    8: "hyperparameter sensitivity",
}

_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"::test_c(\d+)_", report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    if report.when != "call" and not (report.skipped or report.failed):
        return
    entry = _results.setdefault(int(m.group(1)), [])
    details = [v for k, v in report.user_properties if k == "detail"]
    outcome = "skipped" if report.skipped else report.outcome
    if report.skipped and isinstance(report.longrepr, tuple):
        details.append(report.longrepr[2].removeprefix("Skipped: "))
    entry.append((report.nodeid.split("::")[-1], outcome, details))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, title in CRITERIA.items():
        runs = _results.get(num)
        if not runs:
            continue
        outcomes = {o for _, o, _ in runs}
        if "failed" in outcomes:
            status = "FAIL"
        elif outcomes == {"skipped"}:
            status = "SKIP"
        else:
            status = "PASS"
        tr.write_line(f"{status}  criterion {num}: {title}")
        for name, outcome, details in runs:
            tr.write_line(f"        {outcome:<7} {name}")
            for d in details:
                tr.write_line(f"                {d}")
