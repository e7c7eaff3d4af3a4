import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from stage.funnel import SynthFunnelConfig, synth_funnel, synth_funnel_with_truth  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture(scope="session")
def small_funnel():
    cfg = SynthFunnelConfig(n0=120, survival_rates=(0.6, 0.5, 0.5), dims_per_stage=(3, 2, 2), seed=11)
    return synth_funnel(cfg)


@pytest.fixture(scope="session")
def small_truth():
    cfg = SynthFunnelConfig(n0=120, survival_rates=(0.6, 0.5, 0.5), dims_per_stage=(3, 2, 2), seed=11)
    return synth_funnel_with_truth(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.RESULTS:
            terminalreporter.write_line(line)
