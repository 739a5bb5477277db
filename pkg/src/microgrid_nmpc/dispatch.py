"""Generator and battery dynamics, stage costs and the multistage program encoding.

Time grid ``t_0 .. t_M`` with step ``dt`` hours. States live on the grid
points ``i = 0..M``, inputs on the intervals ``i = 0..M-1``; the stage cost of
interval ``i`` is charged on the post-step values at ``i + 1``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .conic import ConicProgram, ConstraintKind, VarKind, abs_value_epigraph, big_m_indicator
from .errors import EncodingError
from .grid import DemandSnapshot, GridAlgebraicState, MicrogridSpec, PowerSetpoint
from .qc import QcLayout, add_qc_block, qc_counts

logger = logging.getLogger(__name__)

SKIPPABLE_BLOCKS = frozenset({
    "mode-bounds", "switch-dynamics", "counter-dynamics", "ramping", "max-dwell", "min-dwell", "qc",
})


@dataclass(frozen=True)
class GeneratorParams:
    """Operating envelope and costs of one dispatchable generator.

    Powers in p.u., times in sampling intervals, costs per hour or per p.u.h.
    """
    p_min: float = 1.0
    p_max: float = 3.0
    q_min: float = -2.0
    q_max: float = 2.0
    ramp: float = 1.0
    min_on: int = 2
    max_on: float = math.inf
    min_off: int = 2
    max_off: float = math.inf
    max_startups: int = 2
    base_cost: float = 5.0
    fuel_cost: float = 20.0
    startup_cost: float = 5.0
    name: str = "DG"

    def __post_init__(self):
        if not self.p_min > 0:
            raise ValueError(f"{self.name}: p_min must be positive, got {self.p_min}")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"{self.name}: inverted power bounds")
        if not 0 < self.ramp <= 1:
            raise ValueError(f"{self.name}: ramp must lie in (0, 1], got {self.ramp}")
        if self.min_on < 1 or self.min_off < 1:
            raise ValueError(f"{self.name}: minimum on/off times must be at least 1")
        if self.max_on < self.min_on or self.max_off < self.min_off:
            raise ValueError(f"{self.name}: maximum dwell below minimum dwell")
        if self.max_startups < 0:
            raise ValueError(f"{self.name}: max_startups must be nonnegative")


@dataclass(frozen=True)
class BatteryParams:
    """Battery envelope, loss model and aging costs."""
    p_min: float = -5.0
    p_max: float = 5.0
    q_min: float = -2.0
    q_max: float = 2.0
    capacity_min: float = 0.5
    capacity_max: float = 5.0
    efficiency: float = 0.95
    loss_rate: float = 0.04 / 720.0
    throughput_cost: float = 1.0
    soc_aging_cost: float = 1.0
    name: str = "BA"

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"{self.name}: inverted power bounds")
        if self.capacity_min > self.capacity_max:
            raise ValueError(f"{self.name}: inverted capacity bounds")
        if not 0 < self.efficiency <= 1:
            raise ValueError(f"{self.name}: efficiency must lie in (0, 1], got {self.efficiency}")
        if self.loss_rate < 0:
            raise ValueError(f"{self.name}: loss rate must be nonnegative")


@dataclass(frozen=True)
class DeviceParams:
    """Parameters of all devices, ordered like spec.generators / spec.batteries."""
    generators: tuple[GeneratorParams, ...] = ()
    batteries: tuple[BatteryParams, ...] = ()

    def check(self, spec: MicrogridSpec) -> None:
        if len(self.generators) != len(spec.generators) or len(self.batteries) != len(spec.batteries):
            raise EncodingError(
                f"{len(self.generators)} generator / {len(self.batteries)} battery parameter sets for "
                f"{len(spec.generators)} generators / {len(spec.batteries)} batteries in the grid"
            )


def _arr(values, dtype=float) -> np.ndarray:
    return np.array(values, dtype=dtype, copy=True).reshape(-1)


@dataclass
class DispatchState:
    """Dynamic state x: device powers, generator mode and counter, battery charge."""
    p_g: np.ndarray
    q_g: np.ndarray
    p_b: np.ndarray
    q_b: np.ndarray
    on: np.ndarray
    counter: np.ndarray
    soc: np.ndarray

    def __post_init__(self):
        for name in ("p_g", "q_g", "p_b", "q_b", "soc"):
            setattr(self, name, _arr(getattr(self, name)))
        self.on = _arr(self.on, int)
        self.counter = _arr(self.counter, int)

    def setpoint(self) -> PowerSetpoint:
        return PowerSetpoint(self.p_g.copy(), self.q_g.copy(), self.p_b.copy(), self.q_b.copy())

    def copy(self) -> DispatchState:
        return DispatchState(self.p_g, self.q_g, self.p_b, self.q_b, self.on, self.counter, self.soc)

    def to_vector(self, include_counter: bool = True) -> np.ndarray:
        parts = [self.p_g, self.q_g, self.p_b, self.q_b, self.on.astype(float)]
        if include_counter:
            parts.append(self.counter.astype(float))
        parts.append(self.soc)
        return np.concatenate(parts)

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("p_g", "q_g", "p_b", "q_b", "on", "counter", "soc")}

    @classmethod
    def from_dict(cls, data: dict) -> DispatchState:
        return cls(**{k: data[k] for k in ("p_g", "q_g", "p_b", "q_b", "on", "counter", "soc")})


@dataclass
class ControlInput:
    """Input u: power changes applied at the start of an interval and generator switches."""
    dp_g: np.ndarray
    dq_g: np.ndarray
    dp_b: np.ndarray
    dq_b: np.ndarray
    switch: np.ndarray

    def __post_init__(self):
        for name in ("dp_g", "dq_g", "dp_b", "dq_b"):
            setattr(self, name, _arr(getattr(self, name)))
        self.switch = _arr(self.switch, int)
        if np.any((self.switch != 0) & (self.switch != 1)):
            raise ValueError(f"switch values must be 0 or 1, got {self.switch.tolist()}")

    @classmethod
    def zeros(cls, n_gen: int, n_bat: int) -> ControlInput:
        return cls(np.zeros(n_gen), np.zeros(n_gen), np.zeros(n_bat), np.zeros(n_bat), np.zeros(n_gen, dtype=int))

    def as_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("dp_g", "dq_g", "dp_b", "dq_b", "switch")}

    @classmethod
    def from_dict(cls, data: dict) -> ControlInput:
        return cls(**{k: data[k] for k in ("dp_g", "dq_g", "dp_b", "dq_b", "switch")})


def step_dynamics(x: DispatchState, u: ControlInput, params: DeviceParams, dt: float) -> DispatchState:
    """Advance the plant by one interval."""
    p_b = x.p_b + u.dp_b
    eff = np.array([b.efficiency for b in params.batteries], dtype=float)
    loss = np.array([b.loss_rate for b in params.batteries], dtype=float)
    soc = (1.0 - loss * dt) * x.soc - dt * (p_b + (1.0 - eff) * np.abs(p_b))
    switched = u.switch == 1
    return DispatchState(
        p_g=x.p_g + u.dp_g,
        q_g=x.q_g + u.dq_g,
        p_b=p_b,
        q_b=x.q_b + u.dq_b,
        on=np.where(switched, 1 - x.on, x.on),
        counter=np.where(switched, 0, x.counter + 1),
        soc=soc,
    )


def stage_cost(x: DispatchState, u: ControlInput, params: DeviceParams, dt: float) -> float:
    """Operating cost of the interval that starts in ``x`` under ``u``."""
    nxt = step_dynamics(x, u, params, dt)
    cost = 0.0
    for g, prm in enumerate(params.generators):
        cost += (prm.base_cost * nxt.on[g] + prm.fuel_cost * nxt.p_g[g]) * dt
        if x.on[g] == 0 and u.switch[g] == 1:
            cost += prm.startup_cost
    for b, prm in enumerate(params.batteries):
        cost += (prm.throughput_cost * abs(nxt.p_b[b]) + prm.soc_aging_cost * nxt.soc[b]) * dt
    return float(cost)


def _event_count(on_start: int, on_end: int, switches: Sequence[int], sign: int) -> int:
    s = np.asarray(switches, dtype=int)
    if np.any((s != 0) & (s != 1)):
        raise EncodingError(f"switch sequence must be binary, got {s.tolist()}")
    if on_start not in (0, 1) or on_end not in (0, 1):
        raise EncodingError("on states must be 0 or 1")
    num = sign * (on_end - on_start) + int(s.sum())
    if num % 2:
        raise EncodingError(
            f"switch sequence with {int(s.sum())} switches cannot take mode {on_start} to {on_end}"
        )
    return num // 2


def startup_count(on_start: int, on_end: int, switches: Sequence[int]) -> int:
    """Number of off -> on events, (on_end - on_start + sum(switches)) / 2."""
    return _event_count(on_start, on_end, switches, 1)


def shutdown_count(on_start: int, on_end: int, switches: Sequence[int]) -> int:
    """Number of on -> off events, (on_start - on_end + sum(switches)) / 2."""
    return _event_count(on_start, on_end, switches, -1)


@dataclass
class HorizonEncoding:
    """Variable layout and blocks of one multistage program.

    Attributes:
        program: The assembled program
        M: Number of intervals
        dt: Interval length in hours
        vars: Index arrays; states ``(M+1, n)``: p_g, q_g, on, counter, p_b, q_b, soc;
            inputs ``(M, n)``: dp_g, dq_g, switch, dp_b, dq_b, abs_p_b, direction
        bus_vars: Per grid point dict of p, q, v, theta bus variable indices
        qc_layouts: Per grid point relaxation layout (None when the relaxation is skipped)
    """
    program: ConicProgram
    spec: MicrogridSpec
    params: DeviceParams
    M: int
    dt: float
    demand: list[DemandSnapshot]
    vars: dict[str, np.ndarray]
    bus_vars: list[dict[str, np.ndarray]]
    qc_layouts: list[Optional[QcLayout]]
    exact_battery_abs: bool = False
    skipped: frozenset = field(default_factory=frozenset)

    def algebraic_indices(self, i: int) -> np.ndarray:
        """Indices of z(i) and its lift, in a layout-independent canonical order."""
        layout = self.qc_layouts[i]
        if layout is not None:
            return layout.all_indices()
        bv = self.bus_vars[i]
        return np.concatenate([bv["p"], bv["q"], bv["v"], bv["theta"]]).astype(int)

    def state(self, x: np.ndarray, i: int) -> DispatchState:
        v = self.vars
        return DispatchState(
            x[v["p_g"][i]], x[v["q_g"][i]], x[v["p_b"][i]], x[v["q_b"][i]],
            np.round(x[v["on"][i]]).astype(int), np.round(x[v["counter"][i]]).astype(int), x[v["soc"][i]],
        )

    def control(self, x: np.ndarray, i: int) -> ControlInput:
        v = self.vars
        return ControlInput(x[v["dp_g"][i]], x[v["dq_g"][i]], x[v["dp_b"][i]], x[v["dq_b"][i]],
                            np.round(x[v["switch"][i]]).astype(int))

    def algebraic_state(self, x: np.ndarray, i: int) -> GridAlgebraicState:
        bv = self.bus_vars[i]
        return GridAlgebraicState(x[bv["p"]].copy(), x[bv["q"]].copy(), x[bv["v"]].copy(), x[bv["theta"]].copy())

    def write_state(self, vec: np.ndarray, i: int, s: DispatchState) -> None:
        v = self.vars
        for key in ("p_g", "q_g", "p_b", "q_b", "on", "counter", "soc"):
            vec[v[key][i]] = getattr(s, key)

    def write_control(self, vec: np.ndarray, i: int, u: ControlInput, p_b_next: np.ndarray) -> None:
        """Write u(i) and the battery auxiliaries that follow from p_b(i+1)."""
        v = self.vars
        for key in ("dp_g", "dq_g", "dp_b", "dq_b", "switch"):
            vec[v[key][i]] = getattr(u, key)
        vec[v["abs_p_b"][i]] = np.abs(p_b_next)
        if v["direction"].shape[1]:
            vec[v["direction"][i]] = (np.asarray(p_b_next) >= 0).astype(float)

    def fix_state(self, i: int, s: DispatchState) -> None:
        v = self.vars
        for key in ("p_g", "q_g", "p_b", "q_b", "on", "counter", "soc"):
            for j, val in zip(v[key][i], getattr(s, key)):
                self.program.fix(int(j), float(val))


def _check_demand(spec: MicrogridSpec, demand: Sequence[DemandSnapshot], M: int) -> list[DemandSnapshot]:
    demand = list(demand)
    if len(demand) != M + 1:
        raise EncodingError(f"demand series has {len(demand)} snapshots, expected M+1 = {M + 1}")
    for d in demand:
        if len(d.p_d) != spec.n_buses or len(d.q_d) != spec.n_buses:
            raise EncodingError("demand snapshot does not match the number of buses")
    return demand


def encode_horizon(
    spec: MicrogridSpec,
    params: DeviceParams,
    demand: Sequence[DemandSnapshot],
    M: int,
    dt: float,
    *,
    counter_start_max=None,
    exact_battery_abs: bool = False,
    symmetric: bool = True,
    skip: frozenset = frozenset(),
    name: str = "horizon",
) -> HorizonEncoding:
    """Assemble dynamics, operating limits, stage costs and per-step QC blocks.

    Args:
        spec: Grid
        params: Device parameters in grid device order
        demand: Demand d(0..M)
        M: Number of intervals
        dt: Interval length in hours
        counter_start_max: Upper bound on counter(0), scalar or per generator; the
            counter at step i is bounded by this value plus i (default M)
        exact_battery_abs: Add a binary direction per battery and interval forcing
            the epigraph variable to equal |p_b|
        symmetric: Symmetry-reduced relaxation
        skip: Constraint families to leave out (see SKIPPABLE_BLOCKS)
        name: Program name

    Raises:
        EncodingError: Inconsistent dimensions or a big-M without finite bounds
    """
    params.check(spec)
    if M < 1:
        raise EncodingError(f"horizon needs at least one interval, got M={M}")
    if not dt > 0:
        raise EncodingError(f"interval length must be positive, got {dt}")
    skip = frozenset(skip)
    if skip - SKIPPABLE_BLOCKS:
        raise EncodingError(f"unknown constraint families {sorted(skip - SKIPPABLE_BLOCKS)}")
    demand = _check_demand(spec, demand, M)

    gens, bats = params.generators, params.batteries
    ng, nb = len(gens), len(bats)
    cap0 = np.broadcast_to(np.asarray(M if counter_start_max is None else counter_start_max, dtype=float), (ng,))
    if not np.all(np.isfinite(cap0)):
        raise EncodingError("counter_start_max must be finite")

    prog = ConicProgram(name)
    v = {k: np.zeros((M + 1, ng), dtype=int) for k in ("p_g", "q_g", "on", "counter")}
    v.update({k: np.zeros((M + 1, nb), dtype=int) for k in ("p_b", "q_b", "soc")})
    v.update({k: np.zeros((M, ng), dtype=int) for k in ("dp_g", "dq_g", "switch")})
    v.update({k: np.zeros((M, nb), dtype=int) for k in ("dp_b", "dq_b", "abs_p_b")})
    v["direction"] = np.zeros((M, nb if exact_battery_abs else 0), dtype=int)
    bus_vars: list[dict[str, np.ndarray]] = []
    layouts: list[Optional[QcLayout]] = []

    p_max = [g.p_max for g in gens]
    for i in range(M + 1):
        v["p_g"][i] = prog.add_vars(f"p_g[{i}]", ng, 0.0, p_max)
        v["q_g"][i] = prog.add_vars(f"q_g[{i}]", ng, [min(0.0, g.q_min) for g in gens], [max(0.0, g.q_max) for g in gens])
        v["on"][i] = prog.add_vars(f"on[{i}]", ng, 0.0, 1.0, VarKind.BINARY)
        v["counter"][i] = prog.add_vars(f"counter[{i}]", ng, 0.0, cap0 + i)
        v["p_b"][i] = prog.add_vars(f"p_b[{i}]", nb, [b.p_min for b in bats], [b.p_max for b in bats])
        v["q_b"][i] = prog.add_vars(f"q_b[{i}]", nb, [b.q_min for b in bats], [b.q_max for b in bats])
        v["soc"][i] = prog.add_vars(f"soc[{i}]", nb, [b.capacity_min for b in bats], [b.capacity_max for b in bats])
        if "qc" in skip:
            n = spec.n_buses
            bv = {
                "p": prog.add_vars(f"{i}:p", n),
                "q": prog.add_vars(f"{i}:q", n),
                "v": prog.add_vars(f"{i}:v", n, spec.v_bounds[:, 0], spec.v_bounds[:, 1]),
                "theta": prog.add_vars(f"{i}:theta", n, spec.theta_bounds[:, 0], spec.theta_bounds[:, 1]),
            }
            layouts.append(None)
        else:
            layout = add_qc_block(prog, spec, tag=f"{i}:", block=f"qc[{i}]", symmetric=symmetric)
            bv = {"p": layout.p, "q": layout.q, "v": layout.v, "theta": layout.theta}
            layouts.append(layout)
        bus_vars.append(bv)

    for i in range(M):
        v["dp_g"][i] = prog.add_vars(f"dp_g[{i}]", ng)
        v["dq_g"][i] = prog.add_vars(f"dq_g[{i}]", ng)
        v["switch"][i] = prog.add_vars(f"switch[{i}]", ng, 0.0, 1.0, VarKind.BINARY)
        v["dp_b"][i] = prog.add_vars(f"dp_b[{i}]", nb)
        v["dq_b"][i] = prog.add_vars(f"dq_b[{i}]", nb)
        for b in range(nb):
            v["abs_p_b"][i, b] = abs_value_epigraph(prog, int(v["p_b"][i + 1, b]), f"abs_p_b[{i}][{b}]",
                                                    block=f"battery-abs[{i}]")
        if exact_battery_abs:
            v["direction"][i] = prog.add_vars(f"direction[{i}]", nb, 0.0, 1.0, VarKind.BINARY)

    # grid points
    for i in range(M + 1):
        for g, prm in enumerate(gens):
            p, q, on, c = (int(v[k][i, g]) for k in ("p_g", "q_g", "on", "counter"))
            if "mode-bounds" not in skip:
                big_m_indicator(
                    prog, on,
                    family0=[({p: 1.0}, 0.0), ({p: -1.0}, 0.0), ({q: 1.0}, 0.0), ({q: -1.0}, 0.0)],
                    family1=[({p: 1.0}, prm.p_max), ({p: -1.0}, -prm.p_min),
                             ({q: 1.0}, prm.q_max), ({q: -1.0}, -prm.q_min)],
                    block=f"mode-bounds[{i}]",
                )
            if "max-dwell" not in skip:
                _max_dwell(prog, prm, on, c, f"max-dwell[{i}]")
        _balance_rows(prog, spec, v, bus_vars[i], demand[i], i)

    # intervals
    for i in range(M):
        for g, prm in enumerate(gens):
            on0, on1 = int(v["on"][i, g]), int(v["on"][i + 1, g])
            c0, c1 = int(v["counter"][i, g]), int(v["counter"][i + 1, g])
            s = int(v["switch"][i, g])
            for key, dkey in (("p_g", "dp_g"), ("q_g", "dq_g")):
                prog.add_linear({int(v[key][i + 1, g]): 1.0, int(v[key][i, g]): -1.0, int(v[dkey][i, g]): -1.0},
                                0.0, "==", f"power-dynamics[{i}]")
            if "switch-dynamics" not in skip:
                big_m_indicator(
                    prog, s,
                    family0=[({on1: 1.0, on0: -1.0}, 0.0), ({on1: -1.0, on0: 1.0}, 0.0)],
                    family1=[({on1: 1.0, on0: 1.0}, 1.0), ({on1: -1.0, on0: -1.0}, -1.0)],
                    m0=[1.0, 1.0], m1=[1.0, 1.0],
                    block=f"switch-dynamics[{i}]",
                )
            if "counter-dynamics" not in skip:
                big_m_indicator(
                    prog, s,
                    family0=[({c1: 1.0, c0: -1.0}, 1.0), ({c1: -1.0, c0: 1.0}, -1.0)],
                    family1=[({c1: 1.0}, 0.0)],
                    block=f"counter-dynamics[{i}]",
                )
            if "ramping" not in skip:
                dp = int(v["dp_g"][i, g])
                limit = prm.ramp * prm.p_max * dt
                prog.add_linear({dp: 1.0}, limit, "<=", f"ramping[{i}]")
                prog.add_linear({dp: -1.0}, limit, "<=", f"ramping[{i}]")
            if "min-dwell" not in skip:
                big_m_indicator(
                    prog, s,
                    family1=[({on0: float(prm.min_on - prm.min_off), c0: -1.0}, -float(prm.min_off))],
                    block=f"min-dwell[{i}]",
                )
            prog.add_objective({
                on1: prm.base_cost * dt + 0.5 * prm.startup_cost,
                int(v["p_g"][i + 1, g]): prm.fuel_cost * dt,
                on0: -0.5 * prm.startup_cost,
                s: 0.5 * prm.startup_cost,
            })

        for b, prm in enumerate(bats):
            for key, dkey in (("p_b", "dp_b"), ("q_b", "dq_b")):
                prog.add_linear({int(v[key][i + 1, b]): 1.0, int(v[key][i, b]): -1.0, int(v[dkey][i, b]): -1.0},
                                0.0, "==", f"power-dynamics[{i}]")
            p1, t = int(v["p_b"][i + 1, b]), int(v["abs_p_b"][i, b])
            soc0, soc1 = int(v["soc"][i, b]), int(v["soc"][i + 1, b])
            prog.add_linear({soc1: 1.0, soc0: -(1.0 - prm.loss_rate * dt), p1: dt, t: dt * (1.0 - prm.efficiency)},
                            0.0, "==", f"soc-dynamics[{i}]")
            if exact_battery_abs:
                big_m_indicator(
                    prog, int(v["direction"][i, b]),
                    family0=[({p1: 1.0}, 0.0), ({t: 1.0, p1: 1.0}, 0.0)],
                    family1=[({p1: -1.0}, 0.0), ({t: 1.0, p1: -1.0}, 0.0)],
                    block=f"battery-abs[{i}]",
                )
            prog.add_objective({t: prm.throughput_cost * dt, soc1: prm.soc_aging_cost * dt})

    enc = HorizonEncoding(prog, spec, params, M, dt, demand, v, bus_vars, layouts, exact_battery_abs, skip)
    logger.debug("encoded %s: M=%d, %d variables, %d rows", name, M, prog.n_vars, len(prog.constraints))
    return enc


def _max_dwell(prog: ConicProgram, prm: GeneratorParams, on: int, c: int, block: str) -> None:
    on_finite, off_finite = math.isfinite(prm.max_on), math.isfinite(prm.max_off)
    if on_finite and off_finite:
        prog.add_linear({c: 1.0, on: -(prm.max_on - prm.max_off)}, float(prm.max_off), "<=", block)
    elif on_finite or off_finite:
        big_m_indicator(
            prog, on,
            family0=[({c: 1.0}, float(prm.max_off))] if off_finite else [],
            family1=[({c: 1.0}, float(prm.max_on))] if on_finite else [],
            block=block,
        )


def _balance_rows(prog: ConicProgram, spec: MicrogridSpec, v: dict, bv: dict, d: DemandSnapshot, i: int) -> None:
    """Bus injection equals device output minus demand at every bus."""
    for bus in range(spec.n_buses):
        p_row = {int(bv["p"][bus]): 1.0}
        q_row = {int(bv["q"][bus]): 1.0}
        for g, gbus in enumerate(spec.generators):
            if gbus == bus:
                p_row[int(v["p_g"][i, g])] = -1.0
                q_row[int(v["q_g"][i, g])] = -1.0
        for b, bbus in enumerate(spec.batteries):
            if bbus == bus:
                p_row[int(v["p_b"][i, b])] = -1.0
                q_row[int(v["q_b"][i, b])] = -1.0
        prog.add_linear(p_row, -float(d.p_d[bus]), "==", f"balance[{i}]")
        prog.add_linear(q_row, -float(d.q_d[bus]), "==", f"balance[{i}]")


def horizon_counts(spec: MicrogridSpec, params: DeviceParams, M: int,
                   exact_battery_abs: bool = False, symmetric: bool = True) -> dict[str, int]:
    """Closed-form variable and row counts of :func:`encode_horizon` (nothing skipped)."""
    n, L = spec.n_buses, len(spec.lines)
    ng, nb = len(params.generators), len(params.batteries)
    qc = qc_counts(n, L, symmetric)
    dwell = sum(1 for g in params.generators if math.isfinite(g.max_on) or math.isfinite(g.max_off))
    exact = 1 if exact_battery_abs else 0
    return {
        "variables": (M + 1) * (4 * ng + 3 * nb + 4 * n + qc["n_qc"]) + M * (3 * ng + 3 * nb + exact * nb),
        ConstraintKind.LINEAR_LE.value: (M + 1) * (8 * ng + dwell + qc["linear_le"]) + M * (10 * ng + (2 + 4 * exact) * nb),
        ConstraintKind.LINEAR_EQ.value: (M + 1) * (2 * n + qc["linear_eq"]) + M * (2 * ng + 3 * nb),
        ConstraintKind.QUADRATIC_LE.value: (M + 1) * qc["quadratic"],
        ConstraintKind.SOC.value: (M + 1) * qc["soc"],
    }


@dataclass
class Trajectory:
    """A solved horizon read back into domain objects."""
    states: list[DispatchState]
    inputs: list[ControlInput]
    algebraic: list[GridAlgebraicState]
    costs: list[float]
    objective: float


def decode_trajectory(x: np.ndarray, enc: HorizonEncoding) -> Trajectory:
    """Read states, inputs, algebraic states and per-interval stage costs from an assignment."""
    x = np.asarray(x, dtype=float)
    states = [enc.state(x, i) for i in range(enc.M + 1)]
    inputs = [enc.control(x, i) for i in range(enc.M)]
    algebraic = [enc.algebraic_state(x, i) for i in range(enc.M + 1)]
    costs = [stage_cost(states[i], inputs[i], enc.params, enc.dt) for i in range(enc.M)]
    return Trajectory(states, inputs, algebraic, costs, enc.program.objective_value(x))


def replay(enc: HorizonEncoding, x: np.ndarray) -> list[DispatchState]:
    """Re-simulate the encoded inputs from the encoded initial state."""
    traj = decode_trajectory(x, enc)
    out = [traj.states[0]]
    for u in traj.inputs:
        out.append(step_dynamics(out[-1], u, enc.params, enc.dt))
    return out


def epigraph_gap(enc: HorizonEncoding, x: np.ndarray) -> float:
    """Largest difference between the battery epigraph variables and |p_b|."""
    if enc.vars["abs_p_b"].size == 0:
        return 0.0
    t = x[enc.vars["abs_p_b"]]
    p = np.abs(x[enc.vars["p_b"][1:]])
    return float(np.max(t - p))
