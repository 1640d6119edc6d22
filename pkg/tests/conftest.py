"""Shared pytest wiring: a summary line per acceptance criterion."""

_acceptance_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: release acceptance criterion (one summary line each)"
    )


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "acceptance" in report.keywords:
        _acceptance_outcomes[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance_outcomes):
        verdict = "PASS" if _acceptance_outcomes[nodeid] == "passed" else "FAIL"
        name = nodeid.rsplit("::", 1)[-1]
        terminalreporter.write_line(f"ACCEPTANCE {verdict}: {name}")
