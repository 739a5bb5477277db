"""Closed-loop NMPC simulation."""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .acpf import SetpointBounds, deviation_check
from .conic import SolveStatus, dump_program
from .dispatch import ControlInput, DeviceParams, DispatchState, stage_cost, step_dynamics
from .errors import NoFeasiblePoint, SubproblemInfeasible
from .grid import DemandSnapshot, MicrogridSpec, PowerSetpoint, build_admittance
from .nmpc import (
    FeasibilityReport,
    NmpcConfig,
    NmpcSubproblem,
    PeriodicReference,
    build_subproblem,
    check_feasible,
    distance_to_reference,
    extend_with_reference,
    reference_candidate,
    solve_subproblem,
)

logger = logging.getLogger(__name__)


class DemandTimeline(Protocol):
    def forecast(self, k: int, M: int) -> list[DemandSnapshot]: ...

    def realized(self, k: int) -> DemandSnapshot: ...


@dataclass
class StepRecord:
    """One closed-loop step.

    ``state`` is the realized state x(k+1) reached by applying ``applied`` in
    ``start``. ``v_check`` is nan when the deviation check is disabled and inf
    when no AC-feasible setpoint was found.
    """
    k: int
    start: DispatchState
    applied: ControlInput
    state: DispatchState
    demand: DemandSnapshot
    stage_cost: float
    cumulative_cost: float
    status: str
    objective: float
    nodes: int
    v_check: float
    distance: float
    terminal_residual: float
    extension: Optional[FeasibilityReport] = None


@dataclass
class ClosedLoopRecord:
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def stage_costs(self) -> np.ndarray:
        return np.array([s.stage_cost for s in self.steps])

    @property
    def cumulative_costs(self) -> np.ndarray:
        return np.array([s.cumulative_cost for s in self.steps])

    @property
    def states(self) -> list[DispatchState]:
        """x(0), x(1), ... x(steps)."""
        if not self.steps:
            return []
        return [self.steps[0].start] + [s.state for s in self.steps]

    def switches(self) -> np.ndarray:
        """(steps, n_gen) applied switch decisions."""
        return np.array([s.applied.switch for s in self.steps], dtype=int)

    def max_distance(self) -> float:
        return max((s.distance for s in self.steps), default=0.0)

    def max_v_check(self) -> float:
        values = [s.v_check for s in self.steps if not math.isnan(s.v_check)]
        return max(values, default=0.0)

    def off_intervals(self, g: int) -> list[tuple[int, int]]:
        """Complete off periods of generator ``g`` as (first off state index, length).

        Only runs with an on state on both sides count.
        """
        on = [int(s.on[g]) for s in self.states]
        runs = []
        start = None
        for t in range(1, len(on)):
            if on[t - 1] == 1 and on[t] == 0:
                start = t
            elif on[t - 1] == 0 and on[t] == 1 and start is not None:
                runs.append((start, t - start))
                start = None
        return runs

    def day_costs(self, n_per: int) -> np.ndarray:
        """Stage cost summed over each complete day of ``n_per`` steps."""
        n_days = len(self) // n_per
        return self.stage_costs[:n_days * n_per].reshape(n_days, n_per).sum(axis=1)


def device_bounds(on: np.ndarray, params: DeviceParams) -> SetpointBounds:
    """Setpoint box of the deviation check: generators pinned to zero when off."""
    on = np.asarray(on).astype(bool)
    gens, bats = params.generators, params.batteries
    lo = PowerSetpoint(
        np.where(on, [g.p_min for g in gens], 0.0), np.where(on, [g.q_min for g in gens], 0.0),
        np.array([b.p_min for b in bats]), np.array([b.q_min for b in bats]),
    )
    hi = PowerSetpoint(
        np.where(on, [g.p_max for g in gens], 0.0), np.where(on, [g.q_max for g in gens], 0.0),
        np.array([b.p_max for b in bats]), np.array([b.q_max for b in bats]),
    )
    return SetpointBounds(lo, hi)


def terminal_residual(sub: NmpcSubproblem, x: np.ndarray) -> float:
    """Largest deviation of the predicted terminal state from the reference."""
    enc = sub.encoding
    last = enc.state(x, enc.M)
    target = sub.ref.states[sub.terminal_index]
    parts = [last.p_g - target.p_g, last.q_g - target.q_g, (last.on - target.on).astype(float)]
    soc_gap = last.soc - target.soc
    if sub.cfg.terminal_soc == "at-least":
        soc_gap = np.minimum(soc_gap, 0.0)
    parts.append(soc_gap)
    return float(np.max(np.abs(np.concatenate(parts)), initial=0.0))


def _realize(x: DispatchState, u: ControlInput, params: DeviceParams, dt: float) -> DispatchState:
    nxt = step_dynamics(x, u, params, dt)
    off = nxt.on == 0
    # solver round-off on generators that are off
    nxt.p_g[off] = 0.0
    nxt.q_g[off] = 0.0
    return nxt


def _dump_infeasible(sub: NmpcSubproblem, dump_dir: Optional[Path]) -> Path:
    if dump_dir is None:
        dump_dir = Path(tempfile.mkdtemp(prefix="microgrid-nmpc-"))
    return dump_program(sub.program, Path(dump_dir) / f"infeasible_step_{sub.k}.txt")


def closed_loop_simulate(
    spec: MicrogridSpec,
    params: DeviceParams,
    ref: PeriodicReference,
    scenario: DemandTimeline,
    steps: int,
    cfg: NmpcConfig,
    x0: Optional[DispatchState] = None,
    k0: int = 0,
    check_extension: bool = True,
    dump_dir: Optional[Path] = None,
) -> ClosedLoopRecord:
    """Run the controller for ``steps`` sampling instants.

    Args:
        spec: Grid
        params: Device parameters
        ref: Periodic reference
        scenario: Forecasts d(.|k) and realized demands
        steps: Number of closed-loop steps
        cfg: Controller settings
        x0: Initial state (default: reference state at k0)
        k0: Absolute index of the first step
        check_extension: Evaluate each extension candidate against the next subproblem
        dump_dir: Where to write the program of an infeasible step

    Raises:
        SubproblemInfeasible: A subproblem has no feasible point
    """
    M = cfg.horizon
    x = (x0 or ref.state_at(k0)).copy()
    Y = build_admittance(spec)
    record = ClosedLoopRecord()
    candidate: Optional[np.ndarray] = None
    total = 0.0

    for k in range(k0, k0 + steps):
        sub = build_subproblem(x, k, scenario.forecast(k, M), ref, spec, params, cfg)
        if candidate is None:
            candidate = reference_candidate(ref, x, k, sub.encoding)
        sub.hint = candidate if cfg.use_extension_hint else None

        ext_report = None
        if check_extension and k > k0:
            ext_report = check_feasible(candidate, sub)
            if not ext_report.ok:
                logger.warning("step %d: extension candidate violates %s", k, sorted(ext_report.violations))

        sol = solve_subproblem(sub)
        if sol.status is SolveStatus.INFEASIBLE or sol.x is None:
            path = _dump_infeasible(sub, dump_dir)
            raise SubproblemInfeasible(f"NMPC subproblem at step {k} has no feasible point ({sol.status.value})",
                                       step=k, dump_path=path)

        enc = sub.encoding
        u = enc.control(sol.x, 0)
        nxt = _realize(x, u, params, cfg.dt)
        cost = stage_cost(x, u, params, cfg.dt)
        total += cost

        v_check = math.nan
        if cfg.deviation_check:
            try:
                dev = deviation_check(nxt.setpoint(), scenario.realized(k + 1), spec,
                                      bounds=device_bounds(nxt.on, params),
                                      lift_start=enc.algebraic_state(sol.x, 1),
                                      feas_tol=cfg.feas_tol, Y=Y)
                v_check = dev.v_check
            except NoFeasiblePoint as e:
                logger.warning("step %d: deviation check failed: %s", k, e)
                v_check = math.inf

        step = StepRecord(
            k=k,
            start=x,
            applied=u,
            state=nxt,
            demand=scenario.realized(k + 1),
            stage_cost=cost,
            cumulative_cost=total,
            status=sol.status.value,
            objective=sol.objective,
            nodes=sol.nodes,
            v_check=v_check,
            distance=distance_to_reference(nxt, ref),
            terminal_residual=terminal_residual(sub, sol.x),
            extension=ext_report,
        )
        record.steps.append(step)
        logger.info("step %d: %s, cost %.4f (total %.4f), %d nodes, distance %.2e",
                    k, step.status, cost, total, sol.nodes, step.distance)

        candidate = extend_with_reference(sub, sol.x) if cfg.use_extension_hint or check_extension else None
        x = nxt
    return record


def startup_window_counts(switches: np.ndarray, on0: Sequence[int], window: int) -> np.ndarray:
    """Startups of every generator in every complete window of ``window`` intervals.

    Returns shape ``(n_windows, n_gen)`` for a switch history of shape ``(T, n_gen)``.
    """
    switches = np.asarray(switches, dtype=int)
    T = switches.shape[0]
    on = np.empty((T + 1, switches.shape[1]), dtype=int)
    on[0] = on0
    for t in range(T):
        on[t + 1] = np.where(switches[t] == 1, 1 - on[t], on[t])
    starts = (switches == 1) & (on[:-1] == 0)
    n_windows = max(T - window + 1, 0)
    counts = [starts[i:i + window].sum(axis=0) for i in range(n_windows)]
    return np.array(counts, dtype=int).reshape(n_windows, switches.shape[1])
