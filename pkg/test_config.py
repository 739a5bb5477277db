"""Tests for TOML configuration loading."""

import copy
import math

import numpy as np
import pytest

from microgrid_nmpc.config import build_run_config, load_config
from microgrid_nmpc.errors import ConfigError, GridSpecError

MINIMAL = {
    "grid": {
        "n_buses": 2,
        "reference_bus": 2,
        "line": [{"from": 1, "to": 2, "r": 0.002, "x": 0.006}],
    },
    "generator": [{"bus": 1}],
    "battery": [{"bus": 1}],
    "demand": {"load_bus": 2, "pv_bus": None},
}


def _with(path, value):
    data = copy.deepcopy(MINIMAL)
    node = data
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    return data


def test_shipped_six_bus_config(six_bus_config):
    cfg = six_bus_config
    assert cfg.spec.n_buses == 6
    assert cfg.spec.generators == (0, 1)
    assert cfg.spec.batteries == (2,)
    assert cfg.spec.reference_bus == 5
    assert len(cfg.spec.lines) == 5
    np.testing.assert_array_equal(cfg.spec.v_bounds[5], [1.0, 1.0])
    assert cfg.params.generators[1].name == "DG2"
    assert cfg.params.generators[0].max_on == math.inf
    assert cfg.params.batteries[0].loss_rate == pytest.approx(0.04 / 720)
    assert cfg.nmpc.horizon == 48 and cfg.nmpc.dt == 1.0
    assert cfg.n_per == 24 and cfg.scenario == "nominal"
    assert cfg.profile.load_bus == 5 and cfg.profile.pv_bus == 3


def test_minimal_config_defaults():
    cfg = build_run_config(MINIMAL)
    assert cfg.spec.reference_bus == 1
    assert cfg.spec.theta_bounds[0, 1] == pytest.approx(math.radians(5.0))
    assert cfg.params.generators[0].p_min == 1.0
    assert cfg.nmpc.terminal_soc == "equality"
    assert cfg.demand_file is None


def test_per_bus_overrides_and_admittance_lines():
    data = _with(("grid", "bus"), [{"id": 1, "v_max": 1.1, "g_shunt": 0.01}])
    data["grid"]["line"] = [{"from": 1, "to": 2, "g": 50.0, "b": -150.0}]
    cfg = build_run_config(data)
    assert cfg.spec.v_bounds[0, 1] == 1.1
    assert cfg.spec.ground_admittance[0] == 0.01
    assert cfg.spec.lines[0].b == -150.0


@pytest.mark.parametrize("path, value", [
    (("grid", "reference_bus"), 3),
    (("grid", "v_min"), 1.2),
    (("grid", "colour"), "red"),
    (("grid", "line"), [{"from": 1, "to": 2, "r": 0.1, "x": 0.1, "g": 1.0, "b": 1.0}]),
    (("grid", "line"), [{"from": 1, "to": 2, "r": 0.0, "x": 0.0}]),
    (("generator",), [{"bus": 5}]),
    (("generator",), [{"bus": 1, "p_min": 4.0}]),
    (("battery",), [{"bus": 1, "loss_rate": 0.001, "loss_per_30_days": 0.04}]),
    (("run",), {"terminal_soc": "maybe"}),
    (("run",), {"horizon": 0}),
    (("demand",), {"load_bus": 9}),
])
def test_invalid_configs_raise_config_error(path, value):
    with pytest.raises(ConfigError):
        build_run_config(_with(path, value))


def test_grid_errors_keep_their_category():
    data = _with(("grid", "line"), [{"from": 1, "to": 2, "r": 0.1, "x": 0.1}, {"from": 2, "to": 1, "r": 0.1, "x": 0.1}])
    with pytest.raises(GridSpecError):
        build_run_config(data)


def test_demand_file_resolves_next_to_the_config(tmp_path):
    cfg = build_run_config(_with(("run",), {"demand_file": "demand.csv"}), source=tmp_path / "grid.toml")
    assert cfg.demand_file == tmp_path / "demand.csv"


def test_load_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\nn_buses = 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)
