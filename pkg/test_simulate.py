"""Closed-loop runs: hint handling on a small grid, nominal and varying-solar days on the six-bus grid."""

from dataclasses import replace

import numpy as np
import pytest

import microgrid_nmpc.simulate as simulate
from microgrid_nmpc.dispatch import BatteryParams, ControlInput, DeviceParams, DispatchState, GeneratorParams
from microgrid_nmpc.grid import DemandSnapshot
from microgrid_nmpc.nmpc import NmpcConfig, solve_periodic_ocp
from microgrid_nmpc.scenario import make_nominal_profile, make_perturbed_profile, nominal_timeline
from microgrid_nmpc.simulate import ClosedLoopRecord, StepRecord, closed_loop_simulate, startup_window_counts

STEPS = 48
HORIZON = 12


@pytest.fixture(scope="module")
def six_bus_reference(six_bus_config):
    cfg = six_bus_config
    timeline = nominal_timeline(make_nominal_profile(cfg.spec.n_buses, cfg.n_per, cfg.nmpc.dt, cfg.profile))
    return timeline, solve_periodic_ocp(cfg.spec, cfg.params, timeline.periodic_demand(), cfg.nmpc)


def _two_bus_day():
    d = [DemandSnapshot(np.zeros(2), np.zeros(2)) for _ in range(5)]
    for i, p in enumerate([1.5, 2.0, 1.8, 1.2, 1.5]):
        d[i].p_d[1] = p
        d[i].q_d[1] = 0.3
    return d


@pytest.mark.parametrize("use_hint", [True, False])
def test_hint_follows_the_setting(monkeypatch, two_bus, use_hint):
    params = DeviceParams((GeneratorParams(),), (BatteryParams(),))
    d = _two_bus_day()
    cfg = NmpcConfig(horizon=3, deviation_check=False, use_extension_hint=use_hint)
    ref = solve_periodic_ocp(two_bus, params, d, cfg)
    seen = []
    real = simulate.solve_subproblem

    def recording(sub):
        seen.append(sub.hint)
        return real(sub)

    monkeypatch.setattr(simulate, "solve_subproblem", recording)

    record = closed_loop_simulate(two_bus, params, ref, nominal_timeline(d), steps=3, cfg=cfg)
    assert len(seen) == 3
    assert all((h is not None) == use_hint for h in seen)
    assert all(step.extension is not None for step in record.steps[1:])


def _record(on_history, costs):
    states = [DispatchState([0.0], [0.0], [0.0], [0.0], [on], [0], [1.0]) for on in on_history]
    steps = []
    total = 0.0
    for k, cost in enumerate(costs):
        total += cost
        steps.append(StepRecord(k, states[k], ControlInput.zeros(1, 1), states[k + 1], DemandSnapshot.zeros(2),
                                cost, total, "Optimal", 0.0, 1, 0.0, 0.0, 0.0))
    return ClosedLoopRecord(steps)


def test_off_intervals_need_both_ends():
    record = _record([0, 1, 0, 0, 1, 1, 0, 0], [1.0] * 7)
    assert record.off_intervals(0) == [(2, 2)]
    assert _record([1, 1, 1], [1.0, 1.0]).off_intervals(0) == []


def test_day_costs_drop_the_partial_day():
    record = _record([1] * 8, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])
    np.testing.assert_allclose(record.day_costs(3), [6.0, 15.0])


@pytest.mark.slow
def test_nominal_closed_loop_stays_on_the_reference(six_bus_config, six_bus_reference):
    cfg = six_bus_config
    timeline, ref = six_bus_reference
    nmpc = replace(cfg.nmpc, horizon=HORIZON)

    record = closed_loop_simulate(cfg.spec, cfg.params, ref, timeline, STEPS, nmpc)
    assert len(record) == STEPS
    for step in record.steps:
        assert step.distance <= 1e-6, f"step {step.k} left the reference"
    for step in record.steps[1:]:
        assert step.extension is not None and step.extension.ok, f"extension infeasible at step {step.k}"
    assert record.max_v_check() <= 1e-4


@pytest.mark.slow
def test_varying_solar_shuts_down_a_generator(six_bus_config, six_bus_reference):
    cfg = six_bus_config
    _, ref = six_bus_reference
    nmpc = replace(cfg.nmpc, horizon=HORIZON)
    timeline = make_perturbed_profile(cfg.spec.n_buses, cfg.n_per, nmpc.dt, STEPS + HORIZON, cfg.seed,
                                      cfg.profile, cfg.perturbation)

    record = closed_loop_simulate(cfg.spec, cfg.params, ref, timeline, STEPS, nmpc)
    min_off = cfg.params.generators[1].min_off
    assert any(length >= min_off for _, length in record.off_intervals(1))
    windows = startup_window_counts(record.switches(), record.states[0].on, cfg.n_per)
    for g, prm in enumerate(cfg.params.generators):
        assert windows[:, g].max(initial=0) <= prm.max_startups
    day1, day2 = record.day_costs(cfg.n_per)
    assert day2 < day1
