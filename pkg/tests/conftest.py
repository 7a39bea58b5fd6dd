from hypothesis import HealthCheck, settings

settings.register_profile("default", suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("default")

# acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary
_marks: dict[str, tuple[int, str]] = {}
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _marks[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    mark = _marks.get(report.nodeid)
    if mark is None or (report.when != "call" and not report.failed):
        return
    num, title = mark
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "failed": [], "details": []})
    entry["details"] += [str(v) for k, v in report.user_properties if k == "detail"]
    if report.failed:
        entry["ok"] = False
        entry["failed"].append(report.nodeid.split("::")[-1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        line = f"criterion {num:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["failed"]:
            line += f"  (failed: {', '.join(e['failed'])})"
        for d in e["details"]:
            line += f"\n      {d}"
        terminalreporter.write_line(line)
