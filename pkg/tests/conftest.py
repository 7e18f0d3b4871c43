"""Acceptance report: one PASS/FAIL line per criterion at the end of the run."""

_RESULTS = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    key = props["criterion"]
    if report.when == "call" or report.failed:
        prev = _RESULTS.get(key)
        passed = report.passed and (prev is None or prev[0])
        _RESULTS[key] = (passed, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=int):
        passed, title, detail = _RESULTS[key]
        line = f"criterion {key}: {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
