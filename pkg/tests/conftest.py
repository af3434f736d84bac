import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_c" not in getattr(rep, "nodeid", "") or rep.when != "call":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            name = rep.nodeid.split("::test_")[1]
            lines.append(f"{'PASS' if rep.passed else 'FAIL'}  {name:38s} {detail}")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
