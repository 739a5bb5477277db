"""AC power-flow residuals, Newton power flow and the power-flow deviation check."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import NoConvergence, NoFeasiblePoint, OutOfBounds
from .grid import (
    AdmittanceMatrix,
    DemandSnapshot,
    GridAlgebraicState,
    MicrogridSpec,
    PowerSetpoint,
    build_admittance,
    injections,
    line_power_matrix,
)

logger = logging.getLogger(__name__)

BOX_TOL = 1e-9


@dataclass
class PfResidual:
    """Per-bus mismatch between stated injections and network flows."""
    r_p: np.ndarray
    r_q: np.ndarray

    def norm_inf(self) -> float:
        return float(max(np.max(np.abs(self.r_p), initial=0.0), np.max(np.abs(self.r_q), initial=0.0)))


@dataclass
class NewtonOptions:
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 20
    check_bounds: bool = True


@dataclass
class SetpointBounds:
    """Elementwise box on a PowerSetpoint."""
    lower: PowerSetpoint
    upper: PowerSetpoint

    @classmethod
    def unbounded(cls, spec: MicrogridSpec) -> SetpointBounds:
        ng, nb = len(spec.generators), len(spec.batteries)
        lo = PowerSetpoint(np.full(ng, -np.inf), np.full(ng, -np.inf), np.full(nb, -np.inf), np.full(nb, -np.inf))
        hi = PowerSetpoint(np.full(ng, np.inf), np.full(ng, np.inf), np.full(nb, np.inf), np.full(nb, np.inf))
        return cls(lo, hi)


@dataclass
class DeviationResult:
    """Outcome of the deviation check.

    Attributes:
        v_check: Squared l2 distance of active powers to the projected setpoint
        projected: Nearest AC-realizable setpoint found
        solved_state: Network state that realizes ``projected``
        starts_tried: Number of local solves attempted
        starts_feasible: Number of local solves that ended AC-feasible
    """
    v_check: float
    projected: PowerSetpoint
    solved_state: GridAlgebraicState
    starts_tried: int = 0
    starts_feasible: int = 0


def pf_residual(z: GridAlgebraicState, Y: AdmittanceMatrix) -> PfResidual:
    """r_p[l] = p_l - sum_m p_lm and r_q[l] = q_l - sum_m q_lm."""
    P, Q = line_power_matrix(z, Y)
    return PfResidual(z.p - P.sum(axis=1), z.q - Q.sum(axis=1))


def balance_residual(y: PowerSetpoint, z: GridAlgebraicState, d: DemandSnapshot, spec: MicrogridSpec) -> np.ndarray:
    """Stacked [p; q] mismatch between net injection and device output minus demand."""
    p_dev, q_dev = y.bus_injections(spec)
    return np.concatenate([z.p - (p_dev - d.p_d), z.q - (q_dev - d.q_d)])


def _power_derivatives(V: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dS/dVa and dS/dVm of the complex injections S = V conj(Y V)."""
    I = Y @ V
    Vnorm = V / np.abs(V)
    diagV = np.diag(V)
    dS_dVm = diagV @ np.conj(Y @ np.diag(Vnorm)) + np.conj(np.diag(I)) @ np.diag(Vnorm)
    dS_dVa = 1j * diagV @ np.conj(np.diag(I) - Y @ diagV)
    return dS_dVa, dS_dVm


def _state_from_voltage(V: np.ndarray, Y: AdmittanceMatrix) -> GridAlgebraicState:
    z = GridAlgebraicState(np.zeros(len(V)), np.zeros(len(V)), np.abs(V), np.angle(V))
    z.p, z.q = injections(z, Y)
    return z


def _within_boxes(spec: MicrogridSpec, v: np.ndarray, theta: np.ndarray, tol: float = BOX_TOL) -> bool:
    vb, tb = spec.v_bounds, spec.theta_bounds
    return bool(
        np.all(v >= vb[:, 0] - tol) and np.all(v <= vb[:, 1] + tol)
        and np.all(theta >= tb[:, 0] - tol) and np.all(theta <= tb[:, 1] + tol)
    )


def newton_solve(
    spec: MicrogridSpec,
    p_inj,
    q_inj,
    options: Optional[NewtonOptions] = None,
    Y: Optional[AdmittanceMatrix] = None,
) -> GridAlgebraicState:
    """Solve the power flow for given injections at the non-reference buses.

    Args:
        spec: Grid description; the reference bus is held at v = v_min(ref), theta = 0
        p_inj: Active injections, one per non-reference bus (a full per-bus vector is also accepted)
        q_inj: Reactive injections, same layout as ``p_inj``
        options: Tolerance, iteration and damping limits
        Y: Precomputed admittance matrix

    Returns:
        State with p, q recomputed from the converged voltages at every bus

    Raises:
        NoConvergence: Residual not below tolerance within the iteration limit
        OutOfBounds: Converged voltages leave the grid's v/theta boxes
    """
    options = options or NewtonOptions()
    Y = Y if Y is not None else build_admittance(spec)
    Ybus = Y.Y
    n = spec.n_buses
    pq = spec.non_reference
    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    if p_inj.size == n:
        p_inj, q_inj = p_inj[pq], q_inj[pq]
    if p_inj.size != pq.size or q_inj.size != pq.size:
        raise ValueError(f"expected {pq.size} injections, got {p_inj.size}/{q_inj.size}")
    s_spec = p_inj + 1j * q_inj

    V = np.ones(n, dtype=complex)
    V[spec.reference_bus] = spec.v_bounds[spec.reference_bus, 0]
    npq = pq.size

    def mismatch(Vc: np.ndarray) -> np.ndarray:
        ds = (Vc * np.conj(Ybus @ Vc))[pq] - s_spec
        return np.concatenate([ds.real, ds.imag])

    F = mismatch(V)
    norm = float(np.max(np.abs(F), initial=0.0))
    it = 0
    while norm > options.tol:
        if it >= options.max_iter:
            raise NoConvergence(f"Newton power flow did not converge in {options.max_iter} iterations (|F|={norm:.3e})")
        dS_dVa, dS_dVm = _power_derivatives(V, Ybus)
        J = np.block([
            [dS_dVa[np.ix_(pq, pq)].real, dS_dVm[np.ix_(pq, pq)].real],
            [dS_dVa[np.ix_(pq, pq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as e:
            raise NoConvergence(f"singular power flow Jacobian at iteration {it}") from e

        Va, Vm = np.angle(V), np.abs(V)
        step = 1.0
        for _ in range(options.max_halvings + 1):
            Va_new, Vm_new = Va.copy(), Vm.copy()
            Va_new[pq] += step * dx[:npq]
            Vm_new[pq] += step * dx[npq:]
            V_new = Vm_new * np.exp(1j * Va_new)
            F_new = mismatch(V_new)
            norm_new = float(np.max(np.abs(F_new), initial=0.0))
            if norm_new < norm and np.all(Vm_new > 0):
                break
            step *= 0.5
        else:
            raise NoConvergence(f"damped Newton step failed to reduce the residual at iteration {it} (|F|={norm:.3e})")
        V, F, norm = V_new, F_new, norm_new
        it += 1
        logger.debug("newton iteration %d: |F|=%.3e step=%.3g", it, norm, step)

    z = _state_from_voltage(V, Y)
    if options.check_bounds and not _within_boxes(spec, z.v, z.theta):
        raise OutOfBounds(
            f"power flow solution leaves the voltage/angle boxes "
            f"(v in [{z.v.min():.4f}, {z.v.max():.4f}], |theta| <= {np.abs(z.theta).max():.4f})"
        )
    return z


class _DeviationProblem:
    """Reduced variables x = [p_g, q_g, p_b, q_b, theta_nr, v_nr] of the projection."""

    def __init__(self, spec: MicrogridSpec, Y: AdmittanceMatrix, d: DemandSnapshot, bounds: SetpointBounds):
        self.spec = spec
        self.Y = Y.Y
        self.Yadm = Y
        self.d = d
        self.ng, self.nb = len(spec.generators), len(spec.batteries)
        self.nr = spec.non_reference
        self.n_y = 2 * self.ng + 2 * self.nb

        n = spec.n_buses
        # incidence of device outputs into per-bus p (rows 0..n-1) and q (rows n..2n-1)
        E = np.zeros((2 * n, self.n_y))
        ng, nb = self.ng, self.nb
        for k, bus in enumerate(spec.generators):
            E[bus, k] = 1.0
            E[n + bus, ng + k] = 1.0
        for k, bus in enumerate(spec.batteries):
            E[bus, 2 * ng + k] = 1.0
            E[n + bus, 2 * ng + nb + k] = 1.0
        self.E = E

        lo = bounds.lower.to_vector()
        hi = bounds.upper.to_vector()
        vb, tb = spec.v_bounds[self.nr], spec.theta_bounds[self.nr]
        self.lower = np.concatenate([lo, tb[:, 0], vb[:, 0]])
        self.upper = np.concatenate([hi, tb[:, 1], vb[:, 1]])
        # active-power entries of y carry the objective
        self.p_mask = np.zeros(self.n_y, dtype=bool)
        self.p_mask[:ng] = True
        self.p_mask[2 * ng:2 * ng + nb] = True

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = x[:self.n_y]
        k = self.nr.size
        theta = np.zeros(self.spec.n_buses)
        v = np.full(self.spec.n_buses, self.spec.v_bounds[self.spec.reference_bus, 0])
        theta[self.nr] = x[self.n_y:self.n_y + k]
        v[self.nr] = x[self.n_y + k:]
        return y, v * np.exp(1j * theta)

    def pack(self, y: PowerSetpoint, z: GridAlgebraicState) -> np.ndarray:
        return np.concatenate([y.to_vector(), z.theta[self.nr], z.v[self.nr]])

    def to_setpoint(self, y: np.ndarray) -> PowerSetpoint:
        ng, nb = self.ng, self.nb
        return PowerSetpoint(y[:ng].copy(), y[ng:2 * ng].copy(), y[2 * ng:2 * ng + nb].copy(), y[2 * ng + nb:].copy())

    def residual(self, x: np.ndarray) -> np.ndarray:
        y, V = self.split(x)
        S = V * np.conj(self.Y @ V)
        dev = self.E @ y
        n = self.spec.n_buses
        return np.concatenate([dev[:n] - self.d.p_d - S.real, dev[n:] - self.d.q_d - S.imag])

    def residual_jac(self, x: np.ndarray) -> np.ndarray:
        _, V = self.split(x)
        dS_dVa, dS_dVm = _power_derivatives(V, self.Y)
        dS_dVa, dS_dVm = dS_dVa[:, self.nr], dS_dVm[:, self.nr]
        J_net = np.vstack([np.hstack([dS_dVa.real, dS_dVm.real]), np.hstack([dS_dVa.imag, dS_dVm.imag])])
        return np.hstack([self.E, -J_net])

    def objective(self, x: np.ndarray, p_ref: np.ndarray) -> float:
        diff = x[:self.n_y][self.p_mask] - p_ref
        return float(diff @ diff)

    def objective_grad(self, x: np.ndarray, p_ref: np.ndarray) -> np.ndarray:
        g = np.zeros_like(x)
        g[:self.n_y][self.p_mask] = 2.0 * (x[:self.n_y][self.p_mask] - p_ref)
        return g

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


def deviation_check(
    y_ref: PowerSetpoint,
    d: DemandSnapshot,
    spec: MicrogridSpec,
    bounds: Optional[SetpointBounds] = None,
    lift_start: Optional[GridAlgebraicState] = None,
    n_random_starts: int = 0,
    seed: int = 0,
    feas_tol: float = 1e-6,
    Y: Optional[AdmittanceMatrix] = None,
) -> DeviationResult:
    """Project a relaxation setpoint onto the AC-realizable setpoints.

    Minimizes the squared distance of generator and battery active powers to
    ``y_ref`` subject to the full AC power flow and the power balance. Reactive
    powers are free inside their boxes. Starts: ``y_ref`` with a Newton inner
    solve, then ``lift_start`` if given, then ``n_random_starts`` random points.

    Raises:
        NoFeasiblePoint: No start ended on an AC-feasible point
    """
    Y = Y if Y is not None else build_admittance(spec)
    bounds = bounds or SetpointBounds.unbounded(spec)
    prob = _DeviationProblem(spec, Y, d, bounds)
    p_ref = y_ref.to_vector()[prob.p_mask]

    starts = [_newton_start(prob, y_ref, d, spec, Y)]
    if lift_start is not None:
        starts.append(prob.pack(y_ref, lift_start))
    rng = np.random.default_rng(seed)
    for _ in range(n_random_starts):
        starts.append(_random_start(prob, y_ref, rng))

    best: Optional[tuple[float, np.ndarray]] = None
    n_feasible = 0
    for k, x0 in enumerate(starts):
        x0 = prob.clip(x0)
        res = minimize(
            prob.objective,
            x0,
            args=(p_ref,),
            jac=prob.objective_grad,
            method="SLSQP",
            bounds=list(zip(prob.lower, prob.upper)),
            constraints=[{"type": "eq", "fun": prob.residual, "jac": prob.residual_jac}],
            options={"ftol": 1e-14, "maxiter": 300},
        )
        x = prob.clip(res.x)
        viol = float(np.max(np.abs(prob.residual(x)), initial=0.0))
        if viol > feas_tol:
            logger.debug("deviation start %d ended infeasible (|g|=%.2e, %s)", k, viol, res.message)
            continue
        n_feasible += 1
        value = prob.objective(x, p_ref)
        logger.debug("deviation start %d: v_check=%.3e", k, value)
        if best is None or value < best[0]:
            best = (value, x)

    if best is None:
        raise NoFeasiblePoint(f"none of {len(starts)} starts reached an AC-feasible point")

    value, x = best
    y, V = prob.split(x)
    return DeviationResult(
        v_check=value,
        projected=prob.to_setpoint(y),
        solved_state=_state_from_voltage(V, Y),
        starts_tried=len(starts),
        starts_feasible=n_feasible,
    )


def _newton_start(prob: _DeviationProblem, y_ref: PowerSetpoint, d: DemandSnapshot,
                  spec: MicrogridSpec, Y: AdmittanceMatrix) -> np.ndarray:
    p_dev, q_dev = y_ref.bus_injections(spec)
    try:
        z = newton_solve(spec, p_dev - d.p_d, q_dev - d.q_d, NewtonOptions(check_bounds=False), Y=Y)
    except NoConvergence:
        logger.debug("newton start failed, using flat voltages")
        z = GridAlgebraicState.flat(spec.n_buses)
    return prob.pack(y_ref, z)


def _random_start(prob: _DeviationProblem, y_ref: PowerSetpoint, rng: np.random.Generator) -> np.ndarray:
    x = np.empty(prob.lower.size)
    y = y_ref.to_vector()
    for i, (lo, hi) in enumerate(zip(prob.lower, prob.upper)):
        if np.isfinite(lo) and np.isfinite(hi):
            x[i] = rng.uniform(lo, hi)
        elif i < prob.n_y:
            x[i] = y[i] + rng.normal(scale=1.0)
        else:
            x[i] = 0.0
    return x
