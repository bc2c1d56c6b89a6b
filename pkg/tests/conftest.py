import re

import acceptance_log


def _order(key):
    num, rest = re.match(r"(\d+)(.*)", str(key)).groups()
    return int(num), rest


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.RESULTS, key=_order):
        title, ok, detail = acceptance_log.RESULTS[number]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
