import re

import numpy as np
import pytest

import acceptance_report


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    ran = set()
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                ran.add(int(m.group(1)))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_report.lines(ran):
        terminalreporter.write_line(line)
