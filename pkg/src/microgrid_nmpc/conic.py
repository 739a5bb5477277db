"""Conic programs: container, continuous solve, modeling helpers and text dump.

A ``ConicProgram`` holds bounded variables with integrality marks, a linear
objective and a list of ``ConvexConstraint`` rows. Rows are one of

- linear inequality    ``a.x <= r``
- linear equality      ``a.x == r``
- convex quadratic     ``sum_k w_k (a_k.x + c_k)^2 + a.x <= r`` with ``w_k >= 0``
- second-order cone    ``||(a_k.x + c_k)_k||_2 <= a.x + r``

Coefficient vectors are sparse ``{variable index: coefficient}`` dicts.
The continuous relaxation is handed to cvxpy with the CLARABEL interior point
backend.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from .errors import EncodingError, NumericalFailure

logger = logging.getLogger(__name__)

Coeffs = dict[int, float]


class VarKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    INTEGER = "integer"


class ConstraintKind(str, Enum):
    LINEAR_LE = "linear-inequality"
    LINEAR_EQ = "linear-equality"
    QUADRATIC_LE = "convex-quadratic-inequality"
    SOC = "second-order-cone"


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    GAP_LIMIT = "GapLimit"
    TIME_LIMIT = "TimeLimit"


def _dot(coeffs: Coeffs, x: np.ndarray) -> float:
    return float(sum(c * x[j] for j, c in coeffs.items()))


def _merge(*parts: Coeffs) -> Coeffs:
    out: Coeffs = {}
    for part in parts:
        for j, c in part.items():
            out[j] = out.get(j, 0.0) + c
    return {j: c for j, c in out.items() if c != 0.0}


@dataclass
class ConvexConstraint:
    """One convex row; see the module docstring for the four forms.

    Attributes:
        kind: Row form
        coeffs: Linear part (right-hand side part for SOC rows)
        rhs: Constant right-hand side
        terms: Squared affine terms (w, a, c) for quadratic rows, (a, c) for SOC rows
        block: Label of the constraint block the row belongs to
    """
    kind: ConstraintKind
    coeffs: Coeffs
    rhs: float
    terms: tuple = ()
    block: str = ""

    def __post_init__(self):
        if self.kind is ConstraintKind.QUADRATIC_LE:
            for w, _, _ in self.terms:
                if w < 0:
                    raise ValueError(f"negative weight {w} makes quadratic row nonconvex")
        if self.kind is ConstraintKind.SOC and not self.terms:
            raise ValueError("second-order cone row needs at least one norm term")

    def slack(self, x: np.ndarray) -> float:
        """Signed value g(x); feasible iff <= 0 (== 0 for equalities)."""
        lin = _dot(self.coeffs, x)
        if self.kind in (ConstraintKind.LINEAR_LE, ConstraintKind.LINEAR_EQ):
            return lin - self.rhs
        if self.kind is ConstraintKind.QUADRATIC_LE:
            quad = sum(w * (_dot(a, x) + c) ** 2 for w, a, c in self.terms)
            return quad + lin - self.rhs
        norm = math.sqrt(sum((_dot(a, x) + c) ** 2 for a, c in self.terms))
        return norm - lin - self.rhs

    def violation(self, x: np.ndarray) -> float:
        s = self.slack(x)
        return abs(s) if self.kind is ConstraintKind.LINEAR_EQ else max(s, 0.0)

    def variables(self) -> set[int]:
        out = set(self.coeffs)
        for term in self.terms:
            out.update(term[-2])
        return out


@dataclass
class Solution:
    """Result of a continuous or mixed-integer solve."""
    status: SolveStatus
    x: Optional[np.ndarray] = None
    objective: float = math.inf
    gap: float = math.inf
    nodes: int = 0
    bound: float = -math.inf
    duals: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self) -> bool:
        return self.x is not None and self.status in (SolveStatus.OPTIMAL, SolveStatus.GAP_LIMIT, SolveStatus.TIME_LIMIT)


class ConicProgram:
    """Mixed-integer conic program with a linear objective."""

    def __init__(self, name: str = "program"):
        self.name = name
        self.var_names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.kinds: list[VarKind] = []
        self.objective: Coeffs = {}
        self.objective_constant = 0.0
        self.constraints: list[ConvexConstraint] = []

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    def add_var(self, name: str, lb: float = -math.inf, ub: float = math.inf,
                kind: VarKind = VarKind.CONTINUOUS) -> int:
        kind = VarKind(kind)
        if kind is VarKind.BINARY:
            lb, ub = max(lb, 0.0), min(ub, 1.0)
        if lb > ub:
            raise EncodingError(f"variable {name}: lower bound {lb} above upper bound {ub}")
        self.var_names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.kinds.append(kind)
        return self.n_vars - 1

    def add_vars(self, name: str, count: int, lb=-math.inf, ub=math.inf,
                 kind: VarKind = VarKind.CONTINUOUS) -> np.ndarray:
        lbs = np.broadcast_to(np.asarray(lb, dtype=float), (count,))
        ubs = np.broadcast_to(np.asarray(ub, dtype=float), (count,))
        return np.array([self.add_var(f"{name}[{i}]", lbs[i], ubs[i], kind) for i in range(count)], dtype=int)

    def set_bounds(self, j: int, lb: Optional[float] = None, ub: Optional[float] = None) -> None:
        if lb is not None:
            self.lb[j] = float(lb)
        if ub is not None:
            self.ub[j] = float(ub)
        if self.lb[j] > self.ub[j]:
            raise EncodingError(f"variable {self.var_names[j]}: bounds [{self.lb[j]}, {self.ub[j]}] are empty")

    def fix(self, j: int, value: float) -> None:
        self.lb[j] = self.ub[j] = float(value)

    def set_kind(self, j: int, kind: VarKind) -> None:
        self.kinds[j] = VarKind(kind)

    def add_linear(self, coeffs: Coeffs, rhs: float = 0.0, sense: str = "<=", block: str = "") -> int:
        coeffs = _merge(coeffs)
        if sense == ">=":
            coeffs, rhs, sense = {j: -c for j, c in coeffs.items()}, -rhs, "<="
        kind = {"<=": ConstraintKind.LINEAR_LE, "==": ConstraintKind.LINEAR_EQ}.get(sense)
        if kind is None:
            raise ValueError(f"unknown sense {sense!r}")
        self.constraints.append(ConvexConstraint(kind, coeffs, float(rhs), (), block))
        return len(self.constraints) - 1

    def add_quadratic(self, squares: Sequence[tuple[float, Coeffs, float]], coeffs: Coeffs, rhs: float,
                      block: str = "") -> int:
        terms = tuple((float(w), _merge(a), float(c)) for w, a, c in squares)
        self.constraints.append(ConvexConstraint(ConstraintKind.QUADRATIC_LE, _merge(coeffs), float(rhs), terms, block))
        return len(self.constraints) - 1

    def add_soc(self, norm_terms: Sequence[tuple[Coeffs, float]], coeffs: Coeffs, rhs: float = 0.0,
                block: str = "") -> int:
        terms = tuple((_merge(a), float(c)) for a, c in norm_terms)
        self.constraints.append(ConvexConstraint(ConstraintKind.SOC, _merge(coeffs), float(rhs), terms, block))
        return len(self.constraints) - 1

    def add_objective(self, coeffs: Coeffs, constant: float = 0.0) -> None:
        self.objective = _merge(self.objective, coeffs)
        self.objective_constant += constant

    def lower(self) -> np.ndarray:
        return np.array(self.lb, dtype=float)

    def upper(self) -> np.ndarray:
        return np.array(self.ub, dtype=float)

    def integer_indices(self) -> np.ndarray:
        return np.array([j for j, k in enumerate(self.kinds) if k is not VarKind.CONTINUOUS], dtype=int)

    def objective_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self.objective.items():
            c[j] = v
        return c

    def objective_value(self, x: np.ndarray) -> float:
        return _dot(self.objective, x) + self.objective_constant

    def count(self, kind: ConstraintKind, block: Optional[str] = None) -> int:
        return sum(1 for c in self.constraints if c.kind is kind and (block is None or c.block == block))

    def blocks(self) -> list[str]:
        return list(dict.fromkeys(c.block for c in self.constraints))

    def bound_violation(self, x: np.ndarray) -> float:
        lo, hi = self.lower(), self.upper()
        return float(max(np.max(lo - x, initial=0.0), np.max(x - hi, initial=0.0), 0.0))

    def integrality_violation(self, x: np.ndarray) -> float:
        idx = self.integer_indices()
        if idx.size == 0:
            return 0.0
        return float(np.max(np.abs(x[idx] - np.round(x[idx]))))

    def max_violation(self, x: np.ndarray) -> float:
        rows = max((c.violation(x) for c in self.constraints), default=0.0)
        return max(rows, self.bound_violation(x))

    def block_violations(self, x: np.ndarray, tol: float = 1e-6) -> dict[str, float]:
        """Largest violation per block, listing only blocks above ``tol``."""
        out: dict[str, float] = {}
        for c in self.constraints:
            v = c.violation(x)
            if v > tol:
                out[c.block] = max(out.get(c.block, 0.0), v)
        lo, hi = self.lower(), self.upper()
        bad = np.maximum(lo - x, x - hi)
        for j in np.where(bad > tol)[0]:
            label = f"bounds:{self.var_names[j].split('[')[0]}"
            out[label] = max(out.get(label, 0.0), float(bad[j]))
        return out

    def linear_matrices(self) -> tuple[sp.csr_matrix, np.ndarray, sp.csr_matrix, np.ndarray]:
        """Sparse (A_le, b_le, A_eq, b_eq) of all linear rows."""
        mats = {}
        for kind in (ConstraintKind.LINEAR_LE, ConstraintKind.LINEAR_EQ):
            rows, cols, vals, rhs = [], [], [], []
            for c in self.constraints:
                if c.kind is not kind:
                    continue
                r = len(rhs)
                for j, a in c.coeffs.items():
                    rows.append(r)
                    cols.append(j)
                    vals.append(a)
                rhs.append(c.rhs)
            A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), self.n_vars))
            mats[kind] = (A, np.array(rhs, dtype=float))
        return (*mats[ConstraintKind.LINEAR_LE], *mats[ConstraintKind.LINEAR_EQ])

    def copy(self) -> ConicProgram:
        other = ConicProgram(self.name)
        other.var_names = list(self.var_names)
        other.lb, other.ub, other.kinds = list(self.lb), list(self.ub), list(self.kinds)
        other.objective = dict(self.objective)
        other.objective_constant = self.objective_constant
        other.constraints = list(self.constraints)
        return other


def _row_matrix(terms: Iterable[tuple[Coeffs, float]], n: int, scale: Optional[Sequence[float]] = None):
    rows, cols, vals, const = [], [], [], []
    for r, (a, c) in enumerate(terms):
        s = 1.0 if scale is None else scale[r]
        for j, v in a.items():
            rows.append(r)
            cols.append(j)
            vals.append(s * v)
        const.append(s * c)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(const), n)), np.array(const, dtype=float)


def _sparse_vector(coeffs: Coeffs, n: int) -> np.ndarray:
    v = np.zeros(n)
    for j, c in coeffs.items():
        v[j] = c
    return v


def _stacked_cone_rows(prog: ConicProgram) -> tuple[list[tuple[Coeffs, float]], list[list[tuple[Coeffs, float]]]]:
    """Every quadratic and cone row as ``||(a_k.x + c_k)_k|| <= b.x + r``.

    A quadratic row ``||y||^2 <= s`` with ``s = r - b.x`` becomes
    ``||(2 y, 1 - s)|| <= 1 + s``.
    """
    heads: list[tuple[Coeffs, float]] = []
    bodies: list[list[tuple[Coeffs, float]]] = []
    for row in prog.constraints:
        if row.kind is ConstraintKind.QUADRATIC_LE:
            body = [({j: 2.0 * math.sqrt(w) * c for j, c in a.items()}, 2.0 * math.sqrt(w) * k)
                    for w, a, k in row.terms]
            body.append((dict(row.coeffs), 1.0 - row.rhs))
            heads.append(({j: -c for j, c in row.coeffs.items()}, 1.0 + row.rhs))
            bodies.append(body)
        elif row.kind is ConstraintKind.SOC:
            heads.append((dict(row.coeffs), row.rhs))
            bodies.append(list(row.terms))
    return heads, bodies


class RelaxationModel:
    """cvxpy model of the continuous relaxation, compiled once.

    Bounds of the integer variables are cvxpy parameters so branch-and-bound
    nodes only update parameter values between solves. With ``stacked`` all
    quadratic and cone rows go into a single vectorized cone constraint; the
    model then compiles much faster but reports no row multipliers.
    """

    def __init__(self, prog: ConicProgram, stacked: bool = False):
        self.prog = prog
        self.stacked = stacked
        n = prog.n_vars
        self.x = cp.Variable(n)
        x = self.x
        lb, ub = prog.lower(), prog.upper()
        self.int_idx = prog.integer_indices()
        cont = np.ones(n, dtype=bool)
        cont[self.int_idx] = False

        self.bound_cons = []
        lo_idx = np.where(cont & np.isfinite(lb))[0]
        hi_idx = np.where(cont & np.isfinite(ub))[0]
        if lo_idx.size:
            self.bound_cons.append(("lb", lo_idx, x[lo_idx] >= lb[lo_idx]))
        if hi_idx.size:
            self.bound_cons.append(("ub", hi_idx, x[hi_idx] <= ub[hi_idx]))
        self.lb_param = self.ub_param = None
        if self.int_idx.size:
            self.lb_param = cp.Parameter(self.int_idx.size, value=lb[self.int_idx])
            self.ub_param = cp.Parameter(self.int_idx.size, value=ub[self.int_idx])
            self.bound_cons.append(("lb", self.int_idx, x[self.int_idx] >= self.lb_param))
            self.bound_cons.append(("ub", self.int_idx, x[self.int_idx] <= self.ub_param))

        A_le, b_le, A_eq, b_eq = prog.linear_matrices()
        self.A_le, self.b_le, self.A_eq, self.b_eq = A_le, b_le, A_eq, b_eq
        self.le_con = A_le @ x <= b_le if A_le.shape[0] else None
        self.eq_con = A_eq @ x == b_eq if A_eq.shape[0] else None

        self.quad = []
        self.soc = []
        self.cone_con = None
        if stacked:
            self.cone_con = self._stacked_cone(x, n)
        for row in ([] if stacked else prog.constraints):
            if row.kind is ConstraintKind.QUADRATIC_LE:
                weights = [math.sqrt(w) for w, _, _ in row.terms]
                M, m = _row_matrix(((a, c) for _, a, c in row.terms), n, weights)
                b = _sparse_vector(row.coeffs, n)
                con = cp.sum_squares(M @ x + m) + b @ x <= row.rhs
                self.quad.append((M, m, b, row.rhs, con))
            elif row.kind is ConstraintKind.SOC:
                A, a0 = _row_matrix(row.terms, n)
                c = _sparse_vector(row.coeffs, n)
                con = cp.norm(A @ x + a0, 2) <= c @ x + row.rhs
                self.soc.append((A, a0, c, row.rhs, con))

        cons = [con for _, _, con in self.bound_cons]
        cons += [con for con in (self.le_con, self.eq_con) if con is not None]
        cons += [q[-1] for q in self.quad] + [s[-1] for s in self.soc]
        if self.cone_con is not None:
            cons.append(self.cone_con)
        self.c = prog.objective_vector()
        self.problem = cp.Problem(cp.Minimize(self.c @ x + prog.objective_constant), cons)

    def _stacked_cone(self, x: cp.Variable, n: int):
        heads, bodies = _stacked_cone_rows(self.prog)
        if not heads:
            return None
        width = max(len(body) for body in bodies)
        # component r of row k sits at k * width + r; padding rows stay zero
        terms: list[tuple[Coeffs, float]] = []
        for body in bodies:
            terms += body + [({}, 0.0)] * (width - len(body))
        A, a0 = _row_matrix(terms, n)
        T, t0 = _row_matrix(heads, n)
        X = cp.reshape(A @ x + a0, (width, len(heads)), order="F")
        logger.debug("%s: %d cone rows stacked with width %d", self.prog.name, len(heads), width)
        return cp.SOC(T @ x + t0, X, axis=0)

    def solve(self, lb_int: Optional[np.ndarray] = None, ub_int: Optional[np.ndarray] = None) -> Solution:
        if self.int_idx.size:
            lb, ub = self.prog.lower(), self.prog.upper()
            self.lb_param.value = lb[self.int_idx] if lb_int is None else np.asarray(lb_int, dtype=float)
            self.ub_param.value = ub[self.int_idx] if ub_int is None else np.asarray(ub_int, dtype=float)
            if np.any(self.lb_param.value > self.ub_param.value):
                return Solution(SolveStatus.INFEASIBLE, nodes=1)
        try:
            self.problem.solve(solver=cp.CLARABEL)
        except cp.error.SolverError as e:
            raise NumericalFailure(f"conic backend failed on {self.prog.name}: {e}") from e

        status = self.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return Solution(SolveStatus.INFEASIBLE, nodes=1)
        if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
            return Solution(SolveStatus.UNBOUNDED, objective=-math.inf, nodes=1)
        if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or self.x.value is None:
            raise NumericalFailure(f"conic backend returned status {status!r} on {self.prog.name}")
        if status == cp.OPTIMAL_INACCURATE:
            logger.warning("inaccurate optimum reported for %s", self.prog.name)

        x = np.array(self.x.value, dtype=float)
        obj = float(self.problem.value)
        duals = {} if self.stacked else self._duals()
        return Solution(SolveStatus.OPTIMAL, x=x, objective=obj, gap=0.0, nodes=1, bound=obj, duals=duals)

    def _duals(self) -> dict:
        out = {
            "bounds": [(kind, idx, np.atleast_1d(np.asarray(con.dual_value, dtype=float))) for kind, idx, con in self.bound_cons],
            "le": None if self.le_con is None else np.atleast_1d(np.asarray(self.le_con.dual_value, dtype=float)),
            "quad": [float(np.asarray(q[-1].dual_value)) for q in self.quad],
            "soc": [float(np.asarray(s[-1].dual_value)) for s in self.soc],
        }
        return out


def solve_continuous(prog: ConicProgram) -> Solution:
    """Solve the convex relaxation of ``prog`` (integrality ignored).

    Raises:
        NumericalFailure: The backend broke down; distinct from a certified Infeasible status
    """
    return RelaxationModel(prog).solve()


@dataclass
class KktResiduals:
    primal: float
    stationarity: float
    complementarity: float

    def max(self) -> float:
        return max(self.primal, self.stationarity, self.complementarity)


def kkt_residuals(prog: ConicProgram, sol: Solution) -> KktResiduals:
    """KKT residuals of a continuous solution, scaled by 1 + ||c||_inf.

    Inequality multipliers come from the backend; equality multipliers are
    recovered by least squares so their sign convention does not matter.
    """
    if sol.x is None:
        raise ValueError("solution carries no primal point")
    if "bounds" not in sol.duals:
        raise ValueError("solution carries no multipliers (solved with a stacked model?)")
    model = RelaxationModel(prog)
    x = sol.x
    n = prog.n_vars
    grad = prog.objective_vector().copy()
    comp = 0.0
    duals = sol.duals

    for kind, idx, lam in duals.get("bounds", []):
        lam = np.maximum(lam, 0.0)
        if kind == "lb":
            grad[idx] -= lam
            comp = max(comp, float(np.max(np.abs(lam * (x[idx] - prog.lower()[idx])), initial=0.0)))
        else:
            grad[idx] += lam
            comp = max(comp, float(np.max(np.abs(lam * (prog.upper()[idx] - x[idx])), initial=0.0)))

    if duals.get("le") is not None:
        lam = np.maximum(duals["le"], 0.0)
        grad += model.A_le.T @ lam
        comp = max(comp, float(np.max(np.abs(lam * (model.b_le - model.A_le @ x)), initial=0.0)))

    for (M, m, b, rhs, _), mu in zip(model.quad, duals.get("quad", [])):
        mu = max(mu, 0.0)
        r = M @ x + m
        grad += mu * (2.0 * (M.T @ r) + b)
        comp = max(comp, abs(mu * (float(r @ r) + float(b @ x) - rhs)))

    for (A, a0, c, rhs, _), mu in zip(model.soc, duals.get("soc", [])):
        mu = max(mu, 0.0)
        r = A @ x + a0
        norm = float(np.linalg.norm(r))
        if norm > 0:
            grad += mu * (A.T @ r / norm - c)
        else:
            grad -= mu * c
        comp = max(comp, abs(mu * (norm - float(c @ x) - rhs)))

    if model.A_eq.shape[0]:
        nu, *_ = np.linalg.lstsq(model.A_eq.T.toarray(), -grad, rcond=None)
        grad = grad + model.A_eq.T @ nu

    scale = 1.0 + float(np.max(np.abs(prog.objective_vector()), initial=0.0))
    primal = prog.max_violation(x)
    return KktResiduals(primal / scale, float(np.max(np.abs(grad), initial=0.0)) / scale, comp / scale)


def row_sup(coeffs: Coeffs, rhs: float, lb: np.ndarray, ub: np.ndarray) -> float:
    """sup of coeffs.x - rhs over the variable box (inf if unbounded)."""
    total = -rhs
    for j, a in coeffs.items():
        total += max(a * lb[j], a * ub[j]) if a != 0 else 0.0
    return total


def big_m_indicator(
    prog: ConicProgram,
    s: int,
    family0: Sequence[tuple[Coeffs, float]] = (),
    family1: Sequence[tuple[Coeffs, float]] = (),
    m0: Optional[Sequence[Optional[float]]] = None,
    m1: Optional[Sequence[Optional[float]]] = None,
    block: str = "",
) -> list[int]:
    """Encode ``s = 0 => a.x <= b`` (family0) and ``s = 1 => c.x <= d`` (family1).

    Rows become ``a.x <= b + M0 s`` and ``c.x <= d + M1 (1 - s)``. A missing
    M is set to the tightest value, the sup of the row over the variable box.

    Raises:
        EncodingError: M missing for a row with an unbounded sup, or a given M
            below the computable sup
    """
    if prog.kinds[s] is not VarKind.BINARY:
        raise EncodingError(f"indicator variable {prog.var_names[s]} is not binary")
    lb, ub = prog.lower(), prog.upper()
    rows = []
    for fam, ms, active_when in ((family0, m0, 0), (family1, m1, 1)):
        ms = list(ms) if ms is not None else [None] * len(fam)
        if len(ms) != len(fam):
            raise EncodingError(f"{len(fam)} rows but {len(ms)} big-M values")
        for (coeffs, rhs), m in zip(fam, ms):
            sup = row_sup(coeffs, rhs, lb, ub)
            if m is None:
                if not math.isfinite(sup):
                    raise EncodingError(f"row in block {block!r} has no finite big-M over the variable box")
                m = max(sup, 0.0)
            elif math.isfinite(sup) and m < sup - 1e-12:
                raise EncodingError(f"big-M {m} below the box supremum {sup} in block {block!r}")
            if active_when == 0:
                rows.append(prog.add_linear(_merge(coeffs, {s: -m}), rhs, "<=", block))
            else:
                rows.append(prog.add_linear(_merge(coeffs, {s: m}), rhs + m, "<=", block))
    return rows


def abs_value_epigraph(prog: ConicProgram, x: int, name: Optional[str] = None, block: str = "abs") -> int:
    """Add t with -t <= x <= t; t equals |x| wherever larger t is penalized."""
    bound = max(abs(prog.lb[x]), abs(prog.ub[x]))
    t = prog.add_var(name or f"abs({prog.var_names[x]})", 0.0, bound)
    prog.add_linear({x: 1.0, t: -1.0}, 0.0, "<=", block)
    prog.add_linear({x: -1.0, t: -1.0}, 0.0, "<=", block)
    return t


def _fmt_coeffs(coeffs: Coeffs) -> str:
    return " ".join(f"{j}:{c!r}" for j, c in sorted(coeffs.items()))


def _parse_coeffs(tokens: Sequence[str]) -> Coeffs:
    out: Coeffs = {}
    for tok in tokens:
        j, c = tok.split(":")
        out[int(j)] = float(c)
    return out


def _block_token(block: str) -> str:
    return block.replace(" ", "_") or "-"


def dump_program(prog: ConicProgram, path: Path) -> Path:
    """Write ``prog`` in the sparse text format documented in the README."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# conic program {prog.name}", f"NAME {prog.name.replace(' ', '_')}"]
    for j, (name, lo, hi, kind) in enumerate(zip(prog.var_names, prog.lb, prog.ub, prog.kinds)):
        lines.append(f"VAR {j} {kind.value} {lo!r} {hi!r} {name}")
    lines.append(f"OBJ {prog.objective_constant!r} {_fmt_coeffs(prog.objective)}".rstrip())
    for c in prog.constraints:
        blk = _block_token(c.block)
        if c.kind is ConstraintKind.LINEAR_LE:
            lines.append(f"LIN <= {c.rhs!r} {blk} {_fmt_coeffs(c.coeffs)}".rstrip())
        elif c.kind is ConstraintKind.LINEAR_EQ:
            lines.append(f"LIN == {c.rhs!r} {blk} {_fmt_coeffs(c.coeffs)}".rstrip())
        elif c.kind is ConstraintKind.QUADRATIC_LE:
            parts = [f"QUAD {c.rhs!r} {blk} {len(c.terms)}"]
            parts += [f"{w!r} {k!r} {_fmt_coeffs(a)}".rstrip() for w, a, k in c.terms]
            parts.append(_fmt_coeffs(c.coeffs))
            lines.append(" | ".join(parts))
        else:
            parts = [f"SOC {c.rhs!r} {blk} {len(c.terms)}"]
            parts += [f"{k!r} {_fmt_coeffs(a)}".rstrip() for a, k in c.terms]
            parts.append(_fmt_coeffs(c.coeffs))
            lines.append(" | ".join(parts))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_program(path: Path) -> ConicProgram:
    """Read a program written by :func:`dump_program`."""
    prog = ConicProgram()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if not raw.strip() or raw.startswith("#"):
            continue
        head, _, rest = raw.partition(" ")
        if head == "NAME":
            prog.name = rest.strip()
        elif head == "VAR":
            _, kind, lo, hi, name = rest.split(" ", 4)
            prog.var_names.append(name)
            prog.lb.append(float(lo))
            prog.ub.append(float(hi))
            prog.kinds.append(VarKind(kind))
        elif head == "OBJ":
            tokens = rest.split()
            prog.objective_constant = float(tokens[0])
            prog.objective = _parse_coeffs(tokens[1:])
        elif head == "LIN":
            sense, rhs, blk, *tokens = rest.split()
            kind = ConstraintKind.LINEAR_LE if sense == "<=" else ConstraintKind.LINEAR_EQ
            prog.constraints.append(ConvexConstraint(kind, _parse_coeffs(tokens), float(rhs), (), "" if blk == "-" else blk))
        elif head in ("QUAD", "SOC"):
            parts = [p.strip() for p in rest.split("|")]
            rhs, blk, count = parts[0].split()
            count = int(count)
            term_parts = parts[1:1 + count]
            coeffs = _parse_coeffs(parts[1 + count].split()) if len(parts) > 1 + count else {}
            terms = []
            for tp in term_parts:
                tokens = tp.split()
                if head == "QUAD":
                    terms.append((float(tokens[0]), _parse_coeffs(tokens[2:]), float(tokens[1])))
                else:
                    terms.append((_parse_coeffs(tokens[1:]), float(tokens[0])))
            kind = ConstraintKind.QUADRATIC_LE if head == "QUAD" else ConstraintKind.SOC
            prog.constraints.append(ConvexConstraint(kind, coeffs, float(rhs), tuple(terms), "" if blk == "-" else blk))
        else:
            raise ValueError(f"unknown record {head!r} in {path}")
    return prog
