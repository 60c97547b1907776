import sys

import numpy as np
import pytest
import torch

from crrec.data import RewardSpec, SplitSpec, ingest
from crrec.oracle import AffineRule, generate_synthetic_sessions

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_sessions():
    """Planted-rule sessions small enough for unit tests (30 items)."""
    rng = np.random.default_rng(7)
    rule = AffineRule(30)
    records = generate_synthetic_sessions(rule, 120, 12, 0.1, rng)
    ds = ingest(records, 8, RewardSpec("event"), SplitSpec(0.8, 0.1, 0.1))
    return rule, records, ds


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
