"""Tests for argument parsing, overrides and exit codes of the command line."""

import json

import numpy as np
import pytest

from microgrid_nmpc.cli import apply_overrides, build_parser, make_timeline, run
from microgrid_nmpc.config import load_config
from microgrid_nmpc.errors import ConfigError
from microgrid_nmpc.grid import GridAlgebraicState, build_admittance, injections

TWO_BUS_TOML = """
[grid]
n_buses = 2
reference_bus = 2

[[grid.line]]
from = 1
to = 2
r = 0.002
x = 0.006

[[generator]]
bus = 1

[[battery]]
bus = 1

[demand]
load_bus = 2
"""


@pytest.fixture
def two_bus_toml(tmp_path):
    path = tmp_path / "two_bus.toml"
    path.write_text(TWO_BUS_TOML, encoding="utf-8")
    return path


def test_parser_reads_common_flags():
    args = build_parser().parse_args(["simulate", "--horizon", "6", "--scenario", "varying-solar", "--seed", "3"])
    assert args.command == "simulate"
    assert (args.horizon, args.scenario, args.seed) == (6, "varying-solar", 3)
    assert args.config is None and args.reference is None


def test_parser_rejects_unknown_scenario():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["simulate", "--scenario", "cloudy"])


def test_overrides_take_precedence(six_bus_config):
    cfg = load_config()
    args = build_parser().parse_args(["periodic", "--dt", "0.5", "--horizon", "12", "--gap", "0.01", "--steps", "5"])
    cfg = apply_overrides(cfg, args)
    assert cfg.nmpc.dt == 0.5 and cfg.n_per == 48
    assert cfg.nmpc.horizon == 12 and cfg.nmpc.gap == 0.01
    assert cfg.steps == 5
    assert six_bus_config.nmpc.horizon == 48


def test_make_timeline_follows_the_scenario():
    cfg = load_config()
    tl = make_timeline(cfg)
    assert tl.kind == "nominal" and tl.n_per == 24
    cfg.scenario = "varying-solar"
    cfg.steps = 6
    tl = make_timeline(cfg)
    assert tl.kind == "varying-solar"
    assert len(tl.realized_series) == 6 + cfg.nmpc.horizon + 24 + 1
    cfg.scenario = "custom-file"
    with pytest.raises(ConfigError):
        make_timeline(cfg)


@pytest.mark.parametrize("argv", [
    ["periodic", "--config", "does-not-exist.toml"],
    ["nmpc", "--scenario", "custom-file"],
    ["periodic", "--horizon", "0"],
    ["simulate", "--dt", "0.7"],
])
def test_configuration_problems_exit_with_code_2(tmp_path, argv):
    assert run(argv + ["--out", str(tmp_path / "out")]) == 2


def test_check_pf_writes_deviation_file(tmp_path, two_bus_toml):
    spec = load_config(two_bus_toml).spec
    z = GridAlgebraicState(np.zeros(2), np.zeros(2), np.array([1.01, 1.0]), np.array([0.01, 0.0]))
    z.p, z.q = injections(z, build_admittance(spec))
    setpoint = {
        "p_g": [0.6 * z.p[0]], "q_g": [z.q[0] - 0.05],
        "p_b": [0.4 * z.p[0]], "q_b": [0.05],
        "demand": {"p_d": [0.0, -z.p[1]], "q_d": [0.0, -z.q[1]]},
    }
    path = tmp_path / "setpoint.json"
    path.write_text(json.dumps(setpoint), encoding="utf-8")
    out = tmp_path / "out"

    assert run(["check-pf", str(path), "--config", str(two_bus_toml), "--out", str(out)]) == 0
    result = json.loads((out / "deviation.json").read_text(encoding="utf-8"))
    assert result["v_check"] <= 1e-8
    assert result["starts_feasible"] >= 1
    assert result["state"]["v"][1] == pytest.approx(1.0)


def test_check_pf_pins_generators_that_are_off(tmp_path, two_bus_toml):
    spec = load_config(two_bus_toml).spec
    z = GridAlgebraicState(np.zeros(2), np.zeros(2), np.array([1.01, 1.0]), np.array([0.01, 0.0]))
    z.p, z.q = injections(z, build_admittance(spec))
    setpoint = {
        "p_g": [0.6 * z.p[0]], "q_g": [z.q[0] - 0.05],
        "p_b": [0.4 * z.p[0]], "q_b": [0.05],
        "on": [0],
        "demand": {"p_d": [0.0, -z.p[1]], "q_d": [0.0, -z.q[1]]},
    }
    path = tmp_path / "setpoint.json"
    path.write_text(json.dumps(setpoint), encoding="utf-8")
    out = tmp_path / "out"

    assert run(["check-pf", str(path), "--config", str(two_bus_toml), "--out", str(out)]) == 0
    result = json.loads((out / "deviation.json").read_text(encoding="utf-8"))
    assert result["projected"]["p_g"][0] == pytest.approx(0.0, abs=1e-9)
    assert result["projected"]["p_b"][0] == pytest.approx(z.p[0], rel=1e-2)
    assert result["v_check"] >= (0.6 * z.p[0]) ** 2


@pytest.mark.slow
def test_periodic_is_reproducible(tmp_path, two_bus_toml):
    config = tmp_path / "two_bus_day.toml"
    config.write_text(TWO_BUS_TOML + "\n[run]\ndt = 6.0\nn_per = 4\n", encoding="utf-8")
    first, second = tmp_path / "first", tmp_path / "second"

    assert run(["periodic", "--config", str(config), "--out", str(first)]) == 0
    assert run(["periodic", "--config", str(config), "--out", str(second)]) == 0
    assert (first / "reference.json").read_bytes() == (second / "reference.json").read_bytes()
    assert (first / "reference_summary.txt").read_bytes() == (second / "reference_summary.txt").read_bytes()
