import sys

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from lac.skeleton import DEFAULT_TOPOLOGY, SkeletonSequence

settings.register_profile("lac", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("lac")
torch.set_num_threads(1)


def random_sequence(T=16, seed=0, V=DEFAULT_TOPOLOGY.num_joints, C=2):
    rng = np.random.default_rng(seed)
    return SkeletonSequence(rng.normal(size=(T, V, C)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance criteria verdicts, one line each, when that module ran."""
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
