"""Branch-and-bound over conic relaxations for mixed-integer programs."""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass
from itertools import count
from typing import Optional

import numpy as np

from .conic import ConicProgram, RelaxationModel, Solution, SolveStatus
from .errors import NumericalFailure

logger = logging.getLogger(__name__)

NODE_ORDERS = ("best-first", "depth-first")


@dataclass
class BnBOptions:
    """Branch-and-bound settings.

    Attributes:
        gap_tol: Relative optimality gap at which search stops
        feas_tol: Constraint violation accepted for incumbents
        integrality_tol: Distance to the nearest integer treated as integral
        node_limit: Maximum number of relaxations solved (None: unlimited)
        time_limit: Wall-clock limit in seconds (None: unlimited)
        node_order: "best-first" or "depth-first"
        incumbent_hint: Full assignment used as starting incumbent when feasible
    """
    gap_tol: float = 1e-4
    feas_tol: float = 1e-6
    integrality_tol: float = 1e-6
    node_limit: Optional[int] = None
    time_limit: Optional[float] = None
    node_order: str = "best-first"
    incumbent_hint: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("gap_tol", "feas_tol", "integrality_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.node_order not in NODE_ORDERS:
            raise ValueError(f"node_order must be one of {NODE_ORDERS}, got {self.node_order!r}")


@dataclass
class _Node:
    bound: float
    depth: int
    lb: np.ndarray
    ub: np.ndarray


def _cutoff(incumbent: float, gap_tol: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    return incumbent - gap_tol * max(1.0, abs(incumbent))


def _gap(incumbent: float, bound: float) -> float:
    if not math.isfinite(incumbent):
        return math.inf
    if not math.isfinite(bound):
        return math.inf
    return max(0.0, incumbent - bound) / max(1.0, abs(incumbent))


def _branch_index(values: np.ndarray, tol: float) -> int:
    """Most fractional position, lowest position on ties; -1 when all integral."""
    frac = values - np.floor(values)
    score = np.minimum(frac, 1.0 - frac)
    best = float(np.max(score, initial=0.0))
    if best <= tol:
        return -1
    return int(np.flatnonzero(score >= best - 1e-12)[0])


def check_hint(prog: ConicProgram, hint: np.ndarray, opts: BnBOptions) -> Optional[np.ndarray]:
    """Return the hint with integers rounded if it is a feasible assignment, else None."""
    hint = np.asarray(hint, dtype=float)
    if hint.shape != (prog.n_vars,):
        logger.warning("incumbent hint has shape %s, expected (%d,); ignored", hint.shape, prog.n_vars)
        return None
    if prog.integrality_violation(hint) > opts.integrality_tol:
        logger.warning("incumbent hint is not integral; ignored")
        return None
    x = hint.copy()
    idx = prog.integer_indices()
    x[idx] = np.round(x[idx])
    viol = prog.max_violation(x)
    if viol > opts.feas_tol:
        logger.warning("incumbent hint violates constraints by %.3e; ignored", viol)
        return None
    return x


def _polish(prog: ConicProgram, model: RelaxationModel, relax: Solution, int_idx: np.ndarray,
            feas_tol: float) -> Optional[tuple[np.ndarray, float]]:
    """Integral point from an integral relaxation, or None when none is feasible.

    The continuous part is re-solved with the integers fixed at their rounded
    values; the relaxation point with rounded integers is the fallback. The
    first candidate within ``feas_tol`` is returned with its own objective.
    """
    fixed = np.round(relax.x[int_idx])
    fallback = relax.x.copy()
    fallback[int_idx] = fixed
    candidates = []
    if not np.array_equal(model.lb_param.value, model.ub_param.value):
        try:
            sol = model.solve(fixed, fixed)
        except NumericalFailure as e:
            logger.debug("%s: fixed-integer re-solve failed: %s", prog.name, e)
            sol = None
        if sol is not None and sol.status is SolveStatus.OPTIMAL:
            x = sol.x.copy()
            x[int_idx] = fixed
            candidates.append(x)
    candidates.append(fallback)
    for x in candidates:
        if prog.max_violation(x) <= feas_tol:
            return x, prog.objective_value(x)
    logger.warning("%s: integral relaxation point violates constraints by %.3e; discarded",
                   prog.name, prog.max_violation(fallback))
    return None


def solve_miqcp(prog: ConicProgram, opts: Optional[BnBOptions] = None) -> Solution:
    """Solve a mixed-integer conic program to global optimality within ``gap_tol``.

    Each node solves the continuous relaxation with tightened integer bounds;
    the node branches on the most fractional integer variable (lowest index
    on ties). A node is pruned once its bound is within the gap of the
    incumbent, so the incumbent is only replaced by a strictly better point.
    Best-first search dives along the rounding direction until it holds an
    incumbent.

    A node whose relaxation breaks down numerically is skipped and its bound
    kept open; the result is then at most GapLimit.

    Raises:
        NumericalFailure: A relaxation failed and no incumbent was found
    """
    opts = opts or BnBOptions()
    int_idx = prog.integer_indices()
    model = RelaxationModel(prog, stacked=int_idx.size > 0)
    started = time.perf_counter()

    if int_idx.size == 0:
        sol = model.solve()
        return sol

    lb0 = np.ceil(prog.lower()[int_idx] - opts.integrality_tol)
    ub0 = np.floor(prog.upper()[int_idx] + opts.integrality_tol)

    incumbent: Optional[np.ndarray] = None
    inc_obj = math.inf
    if opts.incumbent_hint is not None:
        incumbent = check_hint(prog, opts.incumbent_hint, opts)
        if incumbent is not None:
            inc_obj = prog.objective_value(incumbent)
            logger.debug("%s: starting incumbent from hint, objective %.6g", prog.name, inc_obj)

    seq = count()
    queue: list = []

    def push(node: _Node):
        if opts.node_order == "best-first":
            heapq.heappush(queue, (node.bound, next(seq), node))
        else:
            queue.append((node.bound, next(seq), node))

    def pop() -> _Node:
        if opts.node_order == "best-first":
            return heapq.heappop(queue)[2]
        return queue.pop()[2]

    push(_Node(-math.inf, 0, lb0, ub0))
    dive: Optional[_Node] = None
    nodes = 0
    failed = 0
    status = SolveStatus.OPTIMAL
    root_unbounded = False
    pruned_bound = math.inf
    failed_bound = math.inf

    while queue or dive is not None:
        if opts.node_limit is not None and nodes >= opts.node_limit:
            status = SolveStatus.GAP_LIMIT
            break
        if opts.time_limit is not None and time.perf_counter() - started >= opts.time_limit:
            status = SolveStatus.TIME_LIMIT
            break

        if dive is not None:
            node, dive = dive, None
        else:
            node = pop()
        if node.bound >= _cutoff(inc_obj, opts.gap_tol):
            pruned_bound = min(pruned_bound, node.bound)
            continue

        nodes += 1
        try:
            relax = model.solve(node.lb, node.ub)
        except NumericalFailure as e:
            failed += 1
            failed_bound = min(failed_bound, node.bound)
            logger.warning("%s: node %d skipped: %s", prog.name, nodes, e)
            continue
        if relax.status is SolveStatus.INFEASIBLE:
            continue
        if relax.status is SolveStatus.UNBOUNDED:
            if nodes == 1:
                root_unbounded = True
                break
            continue
        if relax.objective >= _cutoff(inc_obj, opts.gap_tol):
            pruned_bound = min(pruned_bound, relax.objective)
            continue

        values = relax.x[int_idx]
        j = _branch_index(values, opts.integrality_tol)
        if j < 0:
            polished = _polish(prog, model, relax, int_idx, opts.feas_tol)
            if polished is None:
                failed += 1
                failed_bound = min(failed_bound, relax.objective)
            elif polished[1] < inc_obj:
                incumbent, inc_obj = polished
                logger.debug("%s: node %d new incumbent %.6g", prog.name, nodes, inc_obj)
            continue

        v = values[j]
        down_ub = node.ub.copy()
        down_ub[j] = math.floor(v)
        up_lb = node.lb.copy()
        up_lb[j] = math.ceil(v)
        children = [_Node(relax.objective, node.depth + 1, node.lb, down_ub),
                    _Node(relax.objective, node.depth + 1, up_lb, node.ub)]
        if v - math.floor(v) < 0.5:
            children.reverse()
        # children[1] follows the rounding direction; depth-first and dives take it next
        push(children[0])
        if opts.node_order == "best-first" and incumbent is None:
            dive = children[1]
        else:
            push(children[1])

    if dive is not None:
        push(dive)
    if root_unbounded:
        return Solution(SolveStatus.UNBOUNDED, objective=-math.inf, nodes=nodes)

    open_bounds = [entry[0] for entry in queue]
    bound = min(min(open_bounds, default=math.inf), pruned_bound, failed_bound, inc_obj)
    elapsed = time.perf_counter() - started

    if incumbent is None:
        if failed:
            raise NumericalFailure(f"{prog.name}: {failed} node relaxations failed and no incumbent was found")
        if status is SolveStatus.OPTIMAL:
            logger.info("%s: infeasible after %d nodes (%.2fs)", prog.name, nodes, elapsed)
            return Solution(SolveStatus.INFEASIBLE, nodes=nodes)
        logger.info("%s: %s without incumbent after %d nodes", prog.name, status.value, nodes)
        return Solution(status, nodes=nodes, bound=bound)

    if failed and status is SolveStatus.OPTIMAL:
        status = SolveStatus.GAP_LIMIT
    gap = _gap(inc_obj, bound)
    logger.info("%s: %s objective %.6g gap %.2e after %d nodes (%.2fs)",
                prog.name, status.value, inc_obj, gap, nodes, elapsed)
    return Solution(status, x=incumbent, objective=inc_obj, gap=gap, nodes=nodes, bound=bound)
