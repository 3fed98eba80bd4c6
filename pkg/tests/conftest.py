import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("netope", max_examples=40, deadline=None)
settings.load_profile("netope")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "CRITERIA_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
