import re


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            match = re.search(r"test_criterion_(\d+)", rep.nodeid)
            if not match:
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(match.group(1)), f"criterion {match.group(1):>2}: {outcome.upper():6} {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
