import sys

import numpy as np
import pytest

from radekit.tensor import SensorGeometry

# 32 x 20 bins keeps the network and the end-to-end runs fast
SMALL = SensorGeometry(n_r=32, n_a=20, n_d=8, n_e=8, range_max=40.0, azimuth_fov=60.0, elevation_fov=30.0)

SMALL_INI = """\
[sensor]
n_r = 32
n_a = 20
n_d = 8
n_e = 8
range_max = 40.0
azimuth_fov = 60.0
elevation_fov = 30.0
"""


@pytest.fixture
def small_geometry():
    return SMALL


@pytest.fixture
def small_ini(tmp_path):
    p = tmp_path / "small.ini"
    p.write_text(SMALL_INI)
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
