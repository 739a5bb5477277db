"""Shared small grids and device sets for the test modules."""

import math

import numpy as np
import pytest

from microgrid_nmpc.config import load_config
from microgrid_nmpc.dispatch import BatteryParams, DeviceParams, GeneratorParams
from microgrid_nmpc.grid import Line, MicrogridSpec

THETA_5_DEG = math.radians(5.0)


def box_spec(n_buses, lines, generators=(0,), batteries=(0,), reference_bus=None):
    """Grid with v in [0.95, 1.05] and |theta| <= 5 degrees, reference fixed at v=1, theta=0."""
    ref = n_buses - 1 if reference_bus is None else reference_bus
    v_bounds = np.tile([0.95, 1.05], (n_buses, 1))
    theta_bounds = np.tile([-THETA_5_DEG, THETA_5_DEG], (n_buses, 1))
    v_bounds[ref] = 1.0
    theta_bounds[ref] = 0.0
    return MicrogridSpec(
        n_buses=n_buses,
        generators=generators,
        batteries=batteries,
        reference_bus=ref,
        lines=tuple(lines),
        v_bounds=v_bounds,
        theta_bounds=theta_bounds,
    )


@pytest.fixture
def two_bus():
    """Generator and battery at bus 0, load at the reference bus 1."""
    return box_spec(2, [Line.from_impedance(0, 1, 0.002, 0.006)])


@pytest.fixture
def three_bus():
    return box_spec(3, [Line.from_impedance(0, 2, 0.002, 0.006), Line.from_impedance(1, 2, 0.002, 0.006)],
                    generators=(0,), batteries=(1,))


@pytest.fixture
def one_gen_one_bat():
    return DeviceParams((GeneratorParams(),), (BatteryParams(),))


@pytest.fixture(scope="session")
def six_bus_config():
    return load_config()


@pytest.fixture
def six_bus(six_bus_config):
    return six_bus_config.spec
