"""Periodic reference, NMPC subproblems and the extension of solved predictions.

The reference is an ``n_per``-periodic trajectory solved once. Each NMPC
subproblem at absolute step ``k`` starts in the measured state, ends on the
reference at index ``(M + k) mod n_per`` and bounds the startups of every
sliding window of ``n_per`` intervals, with the part of a window beyond the
horizon taken from the reference.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bnb import BnBOptions, solve_miqcp
from .conic import ConicProgram, Solution, SolveStatus, VarKind
from .dispatch import (
    ControlInput,
    DeviceParams,
    DispatchState,
    HorizonEncoding,
    decode_trajectory,
    encode_horizon,
    epigraph_gap,
)
from .errors import EncodingError, ReferenceInfeasible, ScenarioError
from .grid import DemandSnapshot, MicrogridSpec

logger = logging.getLogger(__name__)

TERMINAL_SOC_MODES = ("equality", "at-least")
PERIODIC_DEMAND_TOL = 1e-12


@dataclass
class NmpcConfig:
    """Controller settings shared by the periodic problem and the NMPC subproblems."""
    horizon: int = 48
    dt: float = 1.0
    gap: float = 1e-4
    feas_tol: float = 1e-6
    node_limit: Optional[int] = None
    time_limit: Optional[float] = None
    node_order: str = "best-first"
    deviation_check: bool = True
    terminal_soc: str = "equality"
    exact_battery_abs: bool = False
    symmetric: bool = True
    use_extension_hint: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be at least 1, got {self.horizon}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.terminal_soc not in TERMINAL_SOC_MODES:
            raise ValueError(f"terminal_soc must be one of {TERMINAL_SOC_MODES}, got {self.terminal_soc!r}")

    def bnb_options(self, hint: Optional[np.ndarray] = None) -> BnBOptions:
        return BnBOptions(
            gap_tol=self.gap,
            feas_tol=self.feas_tol,
            node_limit=self.node_limit,
            time_limit=self.time_limit,
            node_order=self.node_order,
            incumbent_hint=hint,
        )


def _next_switch_table(switches: np.ndarray) -> np.ndarray:
    """tau[l, j] = min{s >= 0 : switch[l, (j + s) mod N] = 1}, inf when l never switches."""
    n_gen, n = switches.shape
    tau = np.full((n_gen, n), math.inf)
    for l in range(n_gen):
        if not switches[l].any():
            continue
        # two sweeps over the doubled sequence resolve the wrap-around
        nxt = math.inf
        for j in range(2 * n - 1, -1, -1):
            if switches[l, j % n]:
                nxt = j
            if j < n:
                tau[l, j] = nxt - j
    return tau


@dataclass
class PeriodicReference:
    """Optimal ``n_per``-periodic operation.

    Attributes:
        n_per: Period length in intervals
        dt: Interval length in hours
        states: x_per(0..n_per-1)
        inputs: u_per(0..n_per-1); u_per(j) takes x_per(j) to x_per(j+1 mod n_per)
        algebraic: (n_per, n_alg) values of z and its relaxation lift per grid point
        abs_power: (n_per, n_bat) battery epigraph values of each interval
        demand: d_per(0..n_per-1)
        objective: Cost of one period
        counter_mod: Per generator (counter(n_per) - counter(0)) / n_per
    """
    n_per: int
    dt: float
    states: list[DispatchState]
    inputs: list[ControlInput]
    algebraic: np.ndarray
    abs_power: np.ndarray
    demand: list[DemandSnapshot]
    objective: float
    counter_mod: np.ndarray
    tau: np.ndarray = field(init=False, repr=False)
    switch_prefix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.states) != self.n_per or len(self.inputs) != self.n_per:
            raise ValueError(f"reference needs {self.n_per} states and inputs")
        self.algebraic = np.asarray(self.algebraic, dtype=float)
        self.abs_power = np.asarray(self.abs_power, dtype=float).reshape(self.n_per, -1)
        self.counter_mod = np.asarray(self.counter_mod, dtype=int)
        sw = self.switches()
        self.tau = _next_switch_table(sw)
        self.switch_prefix = np.concatenate([np.zeros((sw.shape[0], 1), dtype=int), np.cumsum(sw, axis=1)], axis=1)

    @property
    def n_gen(self) -> int:
        return len(self.states[0].on)

    def switches(self) -> np.ndarray:
        """(n_gen, n_per) switch table of the reference."""
        if not self.inputs:
            return np.zeros((0, 0), dtype=int)
        return np.array([u.switch for u in self.inputs], dtype=int).T.reshape(self.n_gen, self.n_per)

    def state_at(self, j: int) -> DispatchState:
        return self.states[j % self.n_per]


def time_to_next_switch(ref: PeriodicReference, l: int, j: int) -> float:
    """Intervals from reference index j until generator l next switches (inf if never)."""
    if not 0 <= j < ref.n_per:
        raise IndexError(f"reference index {j} outside 0..{ref.n_per - 1}")
    return float(ref.tau[l, j])


def interval_switch_count(ref: PeriodicReference, l: int, j_start: int, j_end: int) -> int:
    """Switches of generator l at reference steps j_start..j_end (inclusive, indices wrap)."""
    if j_end < j_start:
        return 0
    n = ref.n_per
    prefix = ref.switch_prefix[l]

    def upto(m: int) -> int:
        # switches at steps 0..m-1 of the infinitely repeated reference
        return (m // n) * int(prefix[n]) + int(prefix[m % n])

    offset = (j_start // n) * n
    return upto(j_end + 1 - offset) - upto(j_start - offset)


def _check_periodic_demand(d_per: Sequence[DemandSnapshot]) -> list[DemandSnapshot]:
    d_per = list(d_per)
    if len(d_per) < 2:
        raise ScenarioError("periodic demand needs at least two snapshots")
    first, last = d_per[0], d_per[-1]
    if (np.max(np.abs(np.asarray(first.p_d) - np.asarray(last.p_d))) > PERIODIC_DEMAND_TOL
            or np.max(np.abs(np.asarray(first.q_d) - np.asarray(last.q_d))) > PERIODIC_DEMAND_TOL):
        raise ScenarioError("demand series is not periodic: d(0) != d(n_per)")
    return d_per


def build_periodic_program(spec: MicrogridSpec, params: DeviceParams, d_per: Sequence[DemandSnapshot],
                           cfg: NmpcConfig) -> tuple[HorizonEncoding, np.ndarray]:
    """Periodic multistage program over d_per(0..n_per); returns the encoding and counter_mod indices."""
    d_per = _check_periodic_demand(d_per)
    n = len(d_per) - 1
    enc = encode_horizon(spec, params, d_per, n, cfg.dt, counter_start_max=n,
                         exact_battery_abs=cfg.exact_battery_abs, symmetric=cfg.symmetric, name="periodic-ocp")
    prog, v = enc.program, enc.vars
    for key in ("p_g", "q_g", "on", "p_b", "q_b", "soc"):
        for j0, jn in zip(v[key][0], v[key][n]):
            prog.add_linear({int(jn): 1.0, int(j0): -1.0}, 0.0, "==", "periodicity")

    mods = prog.add_vars("counter_mod", len(params.generators), 0.0, 1.0, VarKind.INTEGER)
    for g, prm in enumerate(params.generators):
        c0, cn = int(v["counter"][0, g]), int(v["counter"][n, g])
        prog.set_kind(c0, VarKind.INTEGER)
        prog.add_linear({cn: 1.0, c0: -1.0, int(mods[g]): -float(n)}, 0.0, "==", "counter-periodicity")
        # a full-period counter advance only without switches
        for i in range(n):
            prog.add_linear({int(mods[g]): 1.0, int(v["switch"][i, g]): 1.0}, 1.0, "<=", "counter-periodicity")
        prog.add_linear({int(s): 1.0 for s in v["switch"][:, g]}, 2.0 * prm.max_startups, "<=", "startup-budget")
    return enc, mods


def solve_periodic_ocp(spec: MicrogridSpec, params: DeviceParams, d_per: Sequence[DemandSnapshot],
                       cfg: Optional[NmpcConfig] = None) -> PeriodicReference:
    """Globally optimal (within the gap) periodic operation for demand d_per(0..n_per).

    Raises:
        ScenarioError: d_per(0) != d_per(n_per)
        ReferenceInfeasible: No periodic operation serves the demand
    """
    cfg = cfg or NmpcConfig()
    enc, mods = build_periodic_program(spec, params, d_per, cfg)
    n = enc.M
    logger.info("solving periodic problem: n_per=%d, %d variables, %d integer",
                n, enc.program.n_vars, enc.program.integer_indices().size)
    sol = solve_miqcp(enc.program, cfg.bnb_options())
    if sol.status is SolveStatus.INFEASIBLE:
        raise ReferenceInfeasible("periodic problem is infeasible: demand cannot be served within device limits")
    if not sol.ok:
        raise ReferenceInfeasible(f"no periodic operation found ({sol.status.value} after {sol.nodes} nodes)")
    gap = epigraph_gap(enc, sol.x)
    if gap > 1e-6:
        logger.warning("battery epigraph not tight in periodic solution (gap %.3e)", gap)

    traj = decode_trajectory(sol.x, enc)
    ref = PeriodicReference(
        n_per=n,
        dt=cfg.dt,
        states=traj.states[:n],
        inputs=traj.inputs,
        algebraic=np.array([sol.x[enc.algebraic_indices(i)] for i in range(n)]),
        abs_power=sol.x[enc.vars["abs_p_b"]],
        demand=list(enc.demand[:n]),
        objective=sol.objective,
        counter_mod=np.round(sol.x[mods]).astype(int),
    )
    logger.info("periodic reference: objective %.4f, %d startups per period",
                ref.objective, int(ref.switches().sum() // 2))
    return ref


@dataclass
class NmpcSubproblem:
    """Program of one sampling instant with the data it was built from."""
    encoding: HorizonEncoding
    k: int
    x0: DispatchState
    ref: PeriodicReference
    cfg: NmpcConfig
    hint: Optional[np.ndarray] = None

    @property
    def program(self) -> ConicProgram:
        return self.encoding.program

    @property
    def terminal_index(self) -> int:
        return (self.encoding.M + self.k) % self.ref.n_per


def build_subproblem(x0: DispatchState, k: int, demand: Sequence[DemandSnapshot], ref: PeriodicReference,
                     spec: MicrogridSpec, params: DeviceParams, cfg: NmpcConfig,
                     hint: Optional[np.ndarray] = None) -> NmpcSubproblem:
    """NMPC subproblem at absolute step k for forecast d(0..M | k).

    Raises:
        EncodingError: Forecast length, dimensions or reference period are inconsistent
    """
    M = cfg.horizon
    if ref.n_per < 1:
        raise EncodingError("reference has an empty period")
    if abs(ref.dt - cfg.dt) > 1e-12:
        raise EncodingError(f"reference interval {ref.dt} h differs from controller interval {cfg.dt} h")
    enc = encode_horizon(spec, params, demand, M, cfg.dt, counter_start_max=x0.counter,
                         exact_battery_abs=cfg.exact_battery_abs, symmetric=cfg.symmetric,
                         name=f"nmpc-step-{k}")
    prog, v = enc.program, enc.vars
    enc.fix_state(0, x0)

    jm = (M + k) % ref.n_per
    xr = ref.states[jm]
    for g in range(len(params.generators)):
        prog.add_linear({int(v["p_g"][M, g]): 1.0}, float(xr.p_g[g]), "==", "terminal")
        prog.add_linear({int(v["q_g"][M, g]): 1.0}, float(xr.q_g[g]), "==", "terminal")
        prog.add_linear({int(v["on"][M, g]): 1.0}, float(xr.on[g]), "==", "terminal")
    soc_sense = "==" if cfg.terminal_soc == "equality" else ">="
    for b in range(len(params.batteries)):
        prog.add_linear({int(v["soc"][M, b]): 1.0}, float(xr.soc[b]), soc_sense, "terminal")

    for g, prm in enumerate(params.generators):
        tau = ref.tau[g, jm]
        if not math.isfinite(tau):
            continue
        c = int(v["counter"][M, g])
        lo, hi = (prm.min_off, prm.max_off) if xr.on[g] == 0 else (prm.min_on, prm.max_on)
        prog.add_linear({c: -1.0}, tau - lo, "<=", "extendability")
        if math.isfinite(hi):
            prog.add_linear({c: 1.0}, hi - tau, "<=", "extendability")

    _add_startup_windows(prog, v, ref, params, M, k)
    return NmpcSubproblem(enc, k, x0.copy(), ref, cfg, hint)


def window_terms(ref: PeriodicReference, l: int, M: int, k: int, i: int) -> tuple[list[tuple[str, int, float]], float]:
    """Startup count of window [i, i + n_per] split into prediction terms and a reference constant.

    Returns ``([(variable family, step, coefficient)], constant)`` with the count
    equal to ``(sum of terms + constant) / 2``.
    """
    n = ref.n_per
    terms: list[tuple[str, int, float]] = [("on", i, -1.0)]
    last_inside = min(i + n - 1, M - 1)
    terms += [("switch", j, 1.0) for j in range(i, last_inside + 1)]
    const = float(interval_switch_count(ref, l, max(M, i) + k, i + n - 1 + k))
    end = i + n
    if end <= M:
        terms.append(("on", end, 1.0))
    else:
        const += float(ref.state_at(end + k).on[l])
    return terms, const


def _add_startup_windows(prog: ConicProgram, v: dict, ref: PeriodicReference, params: DeviceParams,
                         M: int, k: int) -> None:
    for i in range(M):
        for g, prm in enumerate(params.generators):
            terms, const = window_terms(ref, g, M, k, i)
            coeffs: dict[int, float] = {}
            for fam, step, a in terms:
                j = int(v[fam][step, g])
                coeffs[j] = coeffs.get(j, 0.0) + a
            prog.add_linear(coeffs, 2.0 * prm.max_startups - const, "<=", f"startup-window[{i}]")


def solve_subproblem(sub: NmpcSubproblem) -> Solution:
    return solve_miqcp(sub.program, sub.cfg.bnb_options(sub.hint if sub.cfg.use_extension_hint else None))


def _write_reference_step(enc: HorizonEncoding, vec: np.ndarray, ref: PeriodicReference, i: int, j: int) -> None:
    """Algebraic values of reference index j at grid point i."""
    vec[enc.algebraic_indices(i)] = ref.algebraic[j % ref.n_per]


def _write_tail_control(enc: HorizonEncoding, vec: np.ndarray, ref: PeriodicReference, i: int, j: int,
                        before: DispatchState, after: DispatchState) -> None:
    u_ref = ref.inputs[j % ref.n_per]
    u = ControlInput(after.p_g - before.p_g, after.q_g - before.q_g,
                     after.p_b - before.p_b, after.q_b - before.q_b, u_ref.switch)
    enc.write_control(vec, i, u, after.p_b)
    vec[enc.vars["abs_p_b"][i]] = ref.abs_power[j % ref.n_per]


def _advance_counter(counter: np.ndarray, switch: np.ndarray) -> np.ndarray:
    return np.where(switch == 1, 0, counter + 1)


def reference_candidate(ref: PeriodicReference, x0: DispatchState, k: int, enc: HorizonEncoding) -> np.ndarray:
    """Reference window starting at index k as a full assignment, counters propagated from x0."""
    vec = np.zeros(enc.program.n_vars)
    states = [x0.copy()]
    for i in range(1, enc.M + 1):
        s = ref.state_at(k + i).copy()
        s.counter = _advance_counter(states[-1].counter, ref.inputs[(k + i - 1) % ref.n_per].switch)
        states.append(s)
    for i, s in enumerate(states):
        enc.write_state(vec, i, s)
        _write_reference_step(enc, vec, ref, i, k + i)
    for i in range(enc.M):
        _write_tail_control(enc, vec, ref, i, k + i, states[i], states[i + 1])
    return vec


def extend_with_reference(sub: NmpcSubproblem, x: np.ndarray) -> np.ndarray:
    """Shift a solved step-k prediction by one interval and append the reference.

    The result is a full assignment for the step-(k+1) subproblem, which has
    the same variable layout.
    """
    enc, ref, k = sub.encoding, sub.ref, sub.k
    M = enc.M
    x = np.asarray(x, dtype=float)
    vec = np.zeros_like(x)
    v = enc.vars

    for i in range(M):
        enc.write_state(vec, i, enc.state(x, i + 1))
        vec[enc.algebraic_indices(i)] = x[enc.algebraic_indices(i + 1)]
    for i in range(M - 1):
        for key in ("dp_g", "dq_g", "switch", "dp_b", "dq_b", "abs_p_b", "direction"):
            vec[v[key][i]] = x[v[key][i + 1]]

    last = enc.state(x, M)
    j = M + k
    tail = ref.state_at(j + 1).copy()
    tail.counter = _advance_counter(last.counter, ref.inputs[j % ref.n_per].switch)
    # charge follows the dynamics from x(M|k), which may exceed the reference under "at-least"
    keep = np.array([1.0 - b.loss_rate * enc.dt for b in enc.params.batteries])
    eff = np.array([b.efficiency for b in enc.params.batteries])
    tail.soc = keep * last.soc - enc.dt * (tail.p_b + (1.0 - eff) * ref.abs_power[j % ref.n_per])
    enc.write_state(vec, M, tail)
    _write_reference_step(enc, vec, ref, M, j + 1)
    _write_tail_control(enc, vec, ref, M - 1, j, last, tail)
    return vec


@dataclass
class FeasibilityReport:
    """Violated constraint blocks of a candidate, with their largest violation."""
    violations: dict[str, float]
    max_violation: float

    @property
    def ok(self) -> bool:
        return not self.violations


def check_feasible(candidate: np.ndarray, sub: NmpcSubproblem, tol: Optional[float] = None) -> FeasibilityReport:
    """Evaluate every block of the subproblem at ``candidate``."""
    prog = sub.program
    tol = sub.cfg.feas_tol if tol is None else tol
    x = np.asarray(candidate, dtype=float)
    if x.shape != (prog.n_vars,):
        raise ValueError(f"candidate has shape {x.shape}, program has {prog.n_vars} variables")
    violations = prog.block_violations(x, tol)
    integ = prog.integrality_violation(x)
    if integ > tol:
        violations["integrality"] = integ
    worst = max(violations.values(), default=0.0)
    return FeasibilityReport(violations, worst)


def distance_to_reference(x: DispatchState, ref: PeriodicReference) -> float:
    """min_j ||x - x_per(j)||^2 over powers, modes and charge (counters excluded)."""
    vec = x.to_vector(include_counter=False)
    return float(min(np.sum((vec - s.to_vector(include_counter=False)) ** 2) for s in ref.states))


def save_reference(ref: PeriodicReference, path: Path) -> Path:
    """Write the reference as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "n_per": ref.n_per,
        "dt": ref.dt,
        "objective": ref.objective,
        "counter_mod": ref.counter_mod.tolist(),
        "states": [s.as_dict() for s in ref.states],
        "inputs": [u.as_dict() for u in ref.inputs],
        "algebraic": ref.algebraic.tolist(),
        "abs_power": ref.abs_power.tolist(),
        "demand": [{"p_d": np.asarray(d.p_d).tolist(), "q_d": np.asarray(d.q_d).tolist()} for d in ref.demand],
    }
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
    return path


def load_reference(path: Path) -> PeriodicReference:
    with Path(path).open("r", encoding="utf-8") as f:
        data = json.load(f)
    n = int(data["n_per"])
    return PeriodicReference(
        n_per=n,
        dt=float(data["dt"]),
        states=[DispatchState.from_dict(s) for s in data["states"]],
        inputs=[ControlInput.from_dict(u) for u in data["inputs"]],
        algebraic=np.array(data["algebraic"], dtype=float),
        abs_power=np.array(data["abs_power"], dtype=float).reshape(n, -1),
        demand=[DemandSnapshot(np.array(d["p_d"], dtype=float), np.array(d["q_d"], dtype=float)) for d in data["demand"]],
        objective=float(data["objective"]),
        counter_mod=np.array(data["counter_mod"], dtype=int),
    )
