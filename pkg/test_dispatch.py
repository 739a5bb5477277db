"""Tests for device dynamics, stage costs and the multistage encoding."""

import math

import numpy as np
import pytest

from microgrid_nmpc.bnb import BnBOptions, solve_miqcp
from microgrid_nmpc.conic import ConstraintKind, SolveStatus
from microgrid_nmpc.dispatch import (
    BatteryParams,
    ControlInput,
    DeviceParams,
    DispatchState,
    GeneratorParams,
    decode_trajectory,
    encode_horizon,
    epigraph_gap,
    horizon_counts,
    replay,
    shutdown_count,
    stage_cost,
    startup_count,
    step_dynamics,
)
from microgrid_nmpc.errors import EncodingError
from microgrid_nmpc.grid import DemandSnapshot, GridAlgebraicState, build_admittance, injections
from microgrid_nmpc.qc import lift_ac_point


def _state(p_g=0.0, on=0, counter=0, p_b=0.0, soc=3.0, q_g=0.0, q_b=0.0):
    return DispatchState([p_g], [q_g], [p_b], [q_b], [on], [counter], [soc])


def _control(dp_g=0.0, switch=0, dp_b=0.0, dq_g=0.0, dq_b=0.0):
    return ControlInput([dp_g], [dq_g], [dp_b], [dq_b], [switch])


def test_soc_update_charge_and_discharge():
    params = DeviceParams((GeneratorParams(),), (BatteryParams(efficiency=0.95, loss_rate=0.0),))
    nxt = step_dynamics(_state(soc=3.0), _control(dp_b=1.0), params, dt=1.0)
    assert nxt.soc[0] == pytest.approx(1.95)
    nxt = step_dynamics(_state(soc=3.0), _control(dp_b=-1.0), params, dt=1.0)
    assert nxt.soc[0] == pytest.approx(3.0 + 1.0 - 0.05)


def test_soc_self_discharge():
    params = DeviceParams((GeneratorParams(),), (BatteryParams(loss_rate=0.01),))
    nxt = step_dynamics(_state(soc=2.0), _control(), params, dt=2.0)
    assert nxt.soc[0] == pytest.approx(2.0 * 0.98)


def test_switch_and_counter_table(one_gen_one_bat):
    x = _state(on=0, counter=4)
    on, counter = [], []
    for s in (0, 1, 0, 0, 1, 1):
        x = step_dynamics(x, _control(switch=s), one_gen_one_bat, 1.0)
        on.append(int(x.on[0]))
        counter.append(int(x.counter[0]))
    assert on == [0, 1, 1, 1, 0, 1]
    assert counter == [5, 0, 1, 2, 0, 0]


def test_stage_cost_charges_startup_once(one_gen_one_bat):
    gen, bat = one_gen_one_bat.generators[0], one_gen_one_bat.batteries[0]
    x = _state(on=0, counter=3, soc=3.0)
    u = _control(dp_g=1.5, switch=1, dp_b=1.0)
    nxt = step_dynamics(x, u, one_gen_one_bat, 0.5)
    expected = (gen.base_cost + gen.fuel_cost * 1.5) * 0.5 + gen.startup_cost
    expected += (bat.throughput_cost * 1.0 + bat.soc_aging_cost * nxt.soc[0]) * 0.5
    assert stage_cost(x, u, one_gen_one_bat, 0.5) == pytest.approx(expected)
    # shutdown carries no switching cost
    y = _state(on=1, counter=3, p_g=1.5, soc=3.0)
    off = stage_cost(y, _control(dp_g=-1.5, switch=1), one_gen_one_bat, 1.0)
    assert off == pytest.approx(bat.soc_aging_cost * step_dynamics(y, _control(dp_g=-1.5, switch=1), one_gen_one_bat, 1.0).soc[0])


def _walk(on, switches):
    ups = downs = 0
    for s in switches:
        if s:
            ups += on == 0
            downs += on == 1
            on = 1 - on
    return on, ups, downs


def test_event_counts_match_walk():
    rng = np.random.default_rng(11)
    for _ in range(500):
        on0 = int(rng.integers(0, 2))
        switches = rng.integers(0, 2, size=int(rng.integers(0, 12))).tolist()
        on_end, ups, downs = _walk(on0, switches)
        assert startup_count(on0, on_end, switches) == ups
        assert shutdown_count(on0, on_end, switches) == downs


def test_event_count_rejects_inconsistent_sequence():
    with pytest.raises(EncodingError):
        startup_count(0, 0, [1])
    with pytest.raises(EncodingError):
        startup_count(0, 1, [2])


def test_control_input_rejects_non_binary_switch():
    with pytest.raises(ValueError):
        _control(switch=2)


def test_device_params_validation():
    with pytest.raises(ValueError):
        GeneratorParams(p_min=0.0)
    with pytest.raises(ValueError):
        GeneratorParams(ramp=1.5)
    with pytest.raises(ValueError):
        GeneratorParams(min_on=3, max_on=2)
    with pytest.raises(ValueError):
        BatteryParams(efficiency=1.2)


def _zero_demand(n, M):
    return [DemandSnapshot.zeros(n) for _ in range(M + 1)]


def _actual_counts(prog):
    out = {"variables": prog.n_vars}
    for kind in ConstraintKind:
        out[kind.value] = prog.count(kind)
    return out


def test_counts_small_horizon(two_bus, one_gen_one_bat):
    enc = encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 2), 2, 1.0)
    counts = horizon_counts(two_bus, one_gen_one_bat, 2)
    assert counts == {
        "variables": 93,
        ConstraintKind.LINEAR_LE.value: 99,
        ConstraintKind.LINEAR_EQ.value: 49,
        ConstraintKind.QUADRATIC_LE.value: 9,
        ConstraintKind.SOC.value: 6,
    }
    assert _actual_counts(enc.program) == counts


@pytest.mark.parametrize("exact, symmetric", [(True, True), (False, False), (True, False)])
def test_counts_with_options(three_bus, exact, symmetric):
    params = DeviceParams((GeneratorParams(max_on=6),), (BatteryParams(),))
    enc = encode_horizon(three_bus, params, _zero_demand(3, 3), 3, 0.5,
                         exact_battery_abs=exact, symmetric=symmetric)
    assert _actual_counts(enc.program) == horizon_counts(three_bus, params, 3, exact, symmetric)


def test_encoding_input_validation(two_bus, one_gen_one_bat):
    with pytest.raises(EncodingError):
        encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 1), 2, 1.0)
    with pytest.raises(EncodingError):
        encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 2), 2, 1.0, skip={"nothing"})
    with pytest.raises(EncodingError):
        encode_horizon(two_bus, DeviceParams((), ()), _zero_demand(2, 2), 2, 1.0)
    with pytest.raises(EncodingError):
        encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 0), 0, 1.0)


def test_skip_qc_leaves_no_cones(two_bus, one_gen_one_bat):
    enc = encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 2), 2, 1.0, skip={"qc"})
    assert enc.program.count(ConstraintKind.SOC) == 0
    assert enc.qc_layouts == [None, None, None]
    assert enc.algebraic_indices(0).size == 8


def _hand_trajectory(spec, params, dt):
    """Generator on throughout, battery discharging, AC-consistent network states."""
    Y = build_admittance(spec)
    thetas = [0.01, 0.012, 0.008]
    p_b = [0.2, 0.3, 0.1]
    q_b = [0.1, 0.1, 0.0]
    states, demand, ac = [], [], []
    soc = 3.0
    for i, (theta, pb) in enumerate(zip(thetas, p_b)):
        z = GridAlgebraicState(np.zeros(2), np.zeros(2), np.array([1.01, 1.0]), np.array([theta, 0.0]))
        z.p, z.q = injections(z, Y)
        ac.append(z)
        demand.append(DemandSnapshot(np.array([0.0, -z.p[1]]), np.array([0.0, -z.q[1]])))
        if i > 0:
            bat = params.batteries[0]
            soc = (1 - bat.loss_rate * dt) * soc - dt * (pb + (1 - bat.efficiency) * abs(pb))
        states.append(_state(p_g=z.p[0] - pb, q_g=z.q[0] - q_b[i], on=1, counter=1 + i, p_b=pb, q_b=q_b[i], soc=soc))
    inputs = [
        ControlInput(b.p_g - a.p_g, b.q_g - a.q_g, b.p_b - a.p_b, b.q_b - a.q_b, [0])
        for a, b in zip(states[:-1], states[1:])
    ]
    return states, inputs, demand, ac


def test_hand_built_trajectory_is_feasible(two_bus, one_gen_one_bat):
    dt = 1.0
    states, inputs, demand, ac = _hand_trajectory(two_bus, one_gen_one_bat, dt)
    enc = encode_horizon(two_bus, one_gen_one_bat, demand, 2, dt)
    x = np.zeros(enc.program.n_vars)
    for i, s in enumerate(states):
        enc.write_state(x, i, s)
        lift_ac_point(ac[i], two_bus).assign(enc.qc_layouts[i], x)
    for i, u in enumerate(inputs):
        enc.write_control(x, i, u, states[i + 1].p_b)

    assert enc.program.block_violations(x, tol=1e-9) == {}
    assert epigraph_gap(enc, x) == pytest.approx(0.0, abs=1e-12)
    traj = decode_trajectory(x, enc)
    assert traj.objective == pytest.approx(sum(traj.costs), abs=1e-9)
    for a, b in zip(replay(enc, x), traj.states):
        np.testing.assert_allclose(a.to_vector(), b.to_vector(), atol=1e-12)


def test_missed_counter_step_is_flagged(two_bus, one_gen_one_bat):
    states, inputs, demand, ac = _hand_trajectory(two_bus, one_gen_one_bat, 1.0)
    enc = encode_horizon(two_bus, one_gen_one_bat, demand, 2, 1.0)
    x = np.zeros(enc.program.n_vars)
    states[2].counter[:] = 1
    for i, s in enumerate(states):
        enc.write_state(x, i, s)
        lift_ac_point(ac[i], two_bus).assign(enc.qc_layouts[i], x)
    for i, u in enumerate(inputs):
        enc.write_control(x, i, u, states[i + 1].p_b)
    assert set(enc.program.block_violations(x, tol=1e-9)) == {"counter-dynamics[1]"}


def test_fix_state_pins_bounds(two_bus, one_gen_one_bat):
    enc = encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 1), 1, 1.0)
    s = _state(p_g=1.5, on=1, counter=1, p_b=0.2, soc=2.5)
    enc.fix_state(0, s)
    idx = enc.vars["soc"][0, 0]
    assert enc.program.lb[idx] == enc.program.ub[idx] == 2.5
    idx = enc.vars["on"][0, 0]
    assert enc.program.lb[idx] == enc.program.ub[idx] == 1.0


def test_state_dict_round_trip():
    s = _state(p_g=1.5, on=1, counter=4, p_b=-0.3, soc=2.0)
    back = DispatchState.from_dict(s.as_dict())
    np.testing.assert_array_equal(back.to_vector(), s.to_vector())
    assert s.to_vector(include_counter=False).size == s.to_vector().size - 1


def _block_violation(prog, block, values):
    """Largest violation of the rows of one block at a point given as {index: value}."""
    x = np.zeros(prog.n_vars)
    for j, val in values.items():
        x[j] = val
    return max(c.violation(x) for c in prog.constraints if c.block == block)


def _one_interval(two_bus, gen, **kwargs):
    params = DeviceParams((gen,), (BatteryParams(),))
    return encode_horizon(two_bus, params, _zero_demand(2, 1), 1, 0.5, skip={"qc"}, **kwargs)


def test_mode_bounds_rows(two_bus):
    gen = GeneratorParams(p_min=1.0, p_max=3.0, q_min=-2.0, q_max=1.5)
    enc = _one_interval(two_bus, gen)
    p, q, on = (int(enc.vars[k][0, 0]) for k in ("p_g", "q_g", "on"))
    for mode in (0, 1):
        for pv in np.linspace(0.0, 3.0, 13):
            for qv in np.linspace(-2.0, 2.0, 17):
                feasible = _block_violation(enc.program, "mode-bounds[0]", {p: pv, q: qv, on: mode}) <= 1e-12
                if mode:
                    expected = 1.0 <= pv <= 3.0 and -2.0 <= qv <= 1.5
                else:
                    expected = pv == 0.0 and qv == 0.0
                assert feasible == expected


def test_ramping_rows(two_bus):
    enc = _one_interval(two_bus, GeneratorParams(ramp=0.2))
    dp = int(enc.vars["dp_g"][0, 0])
    # 0.2 * 3.0 * 0.5
    for value, ok in ((0.3, True), (-0.3, True), (0.0, True), (0.31, False), (-0.31, False)):
        assert (_block_violation(enc.program, "ramping[0]", {dp: value}) <= 1e-12) == ok


def test_switch_dynamics_rows(two_bus, one_gen_one_bat):
    enc = encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 1), 1, 1.0, skip={"qc"})
    on0, on1 = int(enc.vars["on"][0, 0]), int(enc.vars["on"][1, 0])
    s = int(enc.vars["switch"][0, 0])
    rows = [(c.coeffs, c.rhs) for c in enc.program.constraints if c.block == "switch-dynamics[0]"]
    assert rows == [
        ({on1: 1.0, on0: -1.0, s: -1.0}, 0.0),
        ({on1: -1.0, on0: 1.0, s: -1.0}, 0.0),
        ({on1: 1.0, on0: 1.0, s: 1.0}, 2.0),
        ({on1: -1.0, on0: -1.0, s: 1.0}, 0.0),
    ]
    for a, b, sv in np.ndindex(2, 2, 2):
        feasible = _block_violation(enc.program, "switch-dynamics[0]", {on0: a, on1: b, s: sv}) <= 1e-12
        assert feasible == (b == a ^ sv)


def test_min_dwell_rows(two_bus):
    enc = _one_interval(two_bus, GeneratorParams(min_on=3, min_off=2))
    on0, c0, s = int(enc.vars["on"][0, 0]), int(enc.vars["counter"][0, 0]), int(enc.vars["switch"][0, 0])
    for mode in (0, 1):
        for counter in range(5):
            for sv in (0, 1):
                feasible = _block_violation(enc.program, "min-dwell[0]", {on0: mode, c0: counter, s: sv}) <= 1e-12
                assert feasible == (sv == 0 or counter >= (3 if mode else 2))


@pytest.mark.parametrize("max_on, max_off", [(4, 3), (4, math.inf), (math.inf, 3)])
def test_max_dwell_rows(two_bus, max_on, max_off):
    enc = _one_interval(two_bus, GeneratorParams(max_on=max_on, max_off=max_off), counter_start_max=10)
    on, c = int(enc.vars["on"][0, 0]), int(enc.vars["counter"][0, 0])
    for mode in (0, 1):
        for counter in range(11):
            feasible = _block_violation(enc.program, "max-dwell[0]", {on: mode, c: counter}) <= 1e-12
            assert feasible == (counter <= (max_on if mode else max_off))


def test_min_on_time_blocks_early_shutdown(two_bus, one_gen_one_bat):
    for counter, expected in ((1, SolveStatus.INFEASIBLE), (2, SolveStatus.OPTIMAL)):
        enc = encode_horizon(two_bus, one_gen_one_bat, _zero_demand(2, 2), 2, 1.0, skip={"qc"})
        enc.fix_state(0, _state(p_g=1.0, on=1, counter=counter))
        enc.program.fix(int(enc.vars["on"][1, 0]), 0.0)
        assert solve_miqcp(enc.program).status is expected


def _admissible(on, counter, switches, gen):
    for s in switches:
        if s and counter < (gen.min_on if on else gen.min_off):
            return False
        on, counter = (1 - on, 0) if s else (on, counter + 1)
    return True


@pytest.mark.parametrize("on0", [0, 1])
@pytest.mark.parametrize("c0", [0, 1, 2])
def test_two_step_switch_sequences_match_rules(two_bus, on0, c0):
    gen = GeneratorParams(min_on=2, min_off=1)
    params = DeviceParams((gen,), (BatteryParams(),))
    for switches in np.ndindex(2, 2):
        enc = encode_horizon(two_bus, params, _zero_demand(2, 2), 2, 1.0, skip={"qc"})
        enc.fix_state(0, _state(p_g=float(on0), on=on0, counter=c0))
        for i, sv in enumerate(switches):
            enc.program.fix(int(enc.vars["switch"][i, 0]), float(sv))
        sol = solve_miqcp(enc.program, BnBOptions(gap_tol=1e-9))
        assert sol.ok == _admissible(on0, c0, switches, gen)
        if sol.ok:
            walk = replay(enc, sol.x)
            for i, st in enumerate(decode_trajectory(sol.x, enc).states):
                assert st.on[0] == walk[i].on[0]
                assert st.counter[0] == walk[i].counter[0]
