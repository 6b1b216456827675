import numpy as np
import pytest

from multinet.encoder import EncoderConfig
from multinet.model import MultiNet, NetworkConfig


def tiny_config(h=64, w=96, dtype="float64", channels=(4, 4, 6, 6, 8), bottleneck=8):
    return NetworkConfig(encoder=EncoderConfig(stage_channels=channels, input_h=h, input_w=w),
                         det_bottleneck=bottleneck, dtype=dtype)


@pytest.fixture
def tiny_model():
    return MultiNet(tiny_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
