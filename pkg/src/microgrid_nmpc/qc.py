"""Convex QC relaxation of the AC power flow manifold.

The envelope builders (:func:`mccormick`, :func:`square_envelope`,
:func:`trig_envelopes`, :func:`current_soc_constraint`) return rows over
symbolic names; :func:`add_qc_block` maps the names onto program variables for
one network snapshot.

Lift layout per snapshot (deterministic: lines sorted by (i, j) with i < j):

    bus variables      p, q, v, theta                        4N
    per bus            vsq = <v_i^2>                          N
    per line           vv, s, c, wc = <vv c>, ws = <vv s>     5L
    per line           p_ij, q_ij, p_ji, q_ji, l_ij           5L

so ``n_QC = N + 10 L``. Rows per snapshot: ``N + 15 L`` linear inequalities,
``N + L`` convex quadratic rows, ``2 L`` cone rows and ``2 N + 5 L``
equalities. Without symmetry reduction every line carries a second set of
vv, s, c, wc, ws for the reversed direction, tied to the first by five
equalities, which adds ``15 L`` linear inequalities, ``L`` quadratic rows
and ``5 L`` variables.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .conic import Coeffs, ConicProgram, dump_program
from .errors import EnvelopeError, OutOfBounds
from .grid import GridAlgebraicState, Line, MicrogridSpec, branch_flow

logger = logging.getLogger(__name__)

LIFT_BOX_TOL = 1e-9

# symbolic rows: ({name: coefficient}, rhs) meaning sum <= rhs
Row = tuple[dict[str, float], float]
# symbolic convex quadratic: ([(weight, {name: coeff}, const)], {name: coeff}, rhs)
QuadRow = tuple[list[tuple[float, dict[str, float], float]], dict[str, float], float]


def _check_interval(lo: float, hi: float, what: str) -> None:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise EnvelopeError(f"{what}: envelope needs finite bounds, got [{lo}, {hi}]")
    if lo > hi:
        raise EnvelopeError(f"{what}: inverted bounds [{lo}, {hi}]")


def mccormick(xl: float, xu: float, yl: float, yu: float) -> list[Row]:
    """Four McCormick rows on (x, y, w) with w standing for <xy>."""
    _check_interval(xl, xu, "x")
    _check_interval(yl, yu, "y")
    return [
        ({"x": yl, "y": xl, "w": -1.0}, xl * yl),
        ({"x": yu, "y": xu, "w": -1.0}, xu * yu),
        ({"x": -yl, "y": -xu, "w": 1.0}, -xu * yl),
        ({"x": -yu, "y": -xl, "w": 1.0}, -xl * yu),
    ]


def square_envelope(xl: float, xu: float) -> tuple[QuadRow, Row]:
    """<x^2> >= x^2 (quadratic) and <x^2> <= (xl + xu) x - xl xu (linear) on (x, X)."""
    _check_interval(xl, xu, "x")
    lower = ([(1.0, {"x": 1.0}, 0.0)], {"X": -1.0}, 0.0)
    upper = ({"X": 1.0, "x": -(xl + xu)}, -xl * xu)
    return lower, upper


def angle_half_width(lo: float, hi: float) -> float:
    """Half-width used by the trigonometric envelopes for a box [lo, hi]."""
    _check_interval(lo, hi, "angle difference")
    if lo > 0 or hi < 0:
        raise EnvelopeError(f"angle difference box [{lo}, {hi}] does not contain 0")
    delta = max(abs(lo), abs(hi))
    if delta >= math.pi / 2:
        raise EnvelopeError(f"angle difference box [{lo}, {hi}] reaches pi/2")
    return delta


def trig_envelopes(lo: float, hi: float) -> tuple[list[Row], QuadRow]:
    """Envelopes of sin and cos over an angle-difference box.

    Names: ``t`` the angle difference, ``s`` for sin t, ``c`` for cos t.
    Returns the linear rows (sine upper, sine lower, cosine lower) and the
    quadratic cosine upper bound.
    """
    delta = angle_half_width(lo, hi)
    half = delta / 2.0
    ch, sh = math.cos(half), math.sin(half)
    # tangents at +-delta/2
    rows = [
        ({"s": 1.0, "t": -ch}, sh - ch * half),
        ({"s": -1.0, "t": ch}, sh - ch * half),
        ({"c": -1.0}, -math.cos(delta)),
    ]
    k = 0.5 if delta == 0.0 else (1.0 - math.cos(delta)) / delta ** 2
    cos_upper = ([(k, {"t": 1.0}, 0.0)], {"c": 1.0}, 1.0)
    return rows, cos_upper


def current_soc_constraint(g: float, b: float) -> tuple[tuple[dict[str, float], float], list[tuple[dict[str, float], float]], dict[str, float]]:
    """Current definition and the rotated-cone row p^2 + q^2 <= <v_i^2> l.

    Names: ``p``, ``q`` the flow in the constrained direction, ``pr``, ``qr``
    the reversed flow, ``X`` for <v_i^2>, ``l`` the current.

    Returns:
        (definition row ``l - g (p + pr) + b (q + qr) == 0``,
         cone norm terms ``(2p, 2q, X - l)``, cone right-hand side ``X + l``)
    """
    definition = ({"l": 1.0, "p": -g, "pr": -g, "q": b, "qr": b}, 0.0)
    norm_terms = [({"p": 2.0}, 0.0), ({"q": 2.0}, 0.0), ({"X": 1.0, "l": -1.0}, 0.0)]
    return definition, norm_terms, {"X": 1.0, "l": 1.0}


def soc_expanded_form(p: float, q: float, vsq: float, l: float) -> float:
    """Left-hand side of p^2 + q^2 + 0.5 vsq^2 + 0.5 l^2 - 0.5 (vsq + l)^2 <= 0."""
    return p * p + q * q + 0.5 * vsq * vsq + 0.5 * l * l - 0.5 * (vsq + l) ** 2


def _resolve(sym: dict[str, float], names: dict[str, Coeffs]) -> Coeffs:
    out: Coeffs = {}
    for name, a in sym.items():
        for j, c in names[name].items():
            out[j] = out.get(j, 0.0) + a * c
    return out


def _add_rows(prog: ConicProgram, rows: list[Row], names: dict[str, Coeffs], block: str) -> None:
    for sym, rhs in rows:
        prog.add_linear(_resolve(sym, names), rhs, "<=", block)


def _add_quad(prog: ConicProgram, row: QuadRow, names: dict[str, Coeffs], block: str) -> None:
    squares, lin, rhs = row
    prog.add_quadratic([(w, _resolve(a, names), c) for w, a, c in squares], _resolve(lin, names), rhs, block)


def _var(j: int) -> Coeffs:
    return {int(j): 1.0}


@dataclass
class QcLayout:
    """Variable indices of one relaxed snapshot inside a ConicProgram."""
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    vsq: np.ndarray
    pairs: list[tuple[int, int, Line]]
    vv: np.ndarray
    s: np.ndarray
    c: np.ndarray
    wc: np.ndarray
    ws: np.ndarray
    p_fw: np.ndarray
    q_fw: np.ndarray
    p_bw: np.ndarray
    q_bw: np.ndarray
    l: np.ndarray
    reverse: Optional[dict[str, np.ndarray]] = None

    def lift_indices(self) -> np.ndarray:
        parts = [self.vsq, self.vv, self.s, self.c, self.wc, self.ws,
                 self.p_fw, self.q_fw, self.p_bw, self.q_bw, self.l]
        if self.reverse:
            parts += [self.reverse[k] for k in ("vv", "s", "c", "wc", "ws")]
        return np.concatenate(parts).astype(int)

    def all_indices(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.theta, self.lift_indices()]).astype(int)

    @property
    def n_qc(self) -> int:
        return int(self.lift_indices().size)


def qc_counts(n_buses: int, n_lines: int, symmetric: bool = True) -> dict[str, int]:
    """Closed-form variable and row counts of one relaxed snapshot."""
    n, L = n_buses, n_lines
    counts = {
        "n_qc": n + 10 * L,
        "linear_le": n + 15 * L,
        "quadratic": n + L,
        "soc": 2 * L,
        "linear_eq": 2 * n + 5 * L,
    }
    if not symmetric:
        counts["n_qc"] += 5 * L
        counts["linear_le"] += 15 * L
        counts["quadratic"] += L
        counts["linear_eq"] += 5 * L
    return counts


def _pair_box(spec: MicrogridSpec, i: int, j: int) -> tuple[float, float]:
    tb = spec.theta_bounds
    return tb[i, 0] - tb[j, 1], tb[i, 1] - tb[j, 0]


def _add_pair_envelopes(prog: ConicProgram, spec: MicrogridSpec, tag: str, a: int, b: int,
                        v: np.ndarray, theta: np.ndarray, block: str) -> dict[str, int]:
    """Product and trigonometric lift of one directed pair (a -> b)."""
    vb = spec.v_bounds
    lo, hi = _pair_box(spec, a, b)
    delta = angle_half_width(lo, hi)
    vv_lo, vv_hi = vb[a, 0] * vb[b, 0], vb[a, 1] * vb[b, 1]
    s_lo, s_hi = math.sin(lo), math.sin(hi)
    c_lo = math.cos(delta)

    vv = prog.add_var(f"{tag}vv[{a},{b}]", vv_lo, vv_hi)
    s = prog.add_var(f"{tag}s[{a},{b}]", s_lo, s_hi)
    c = prog.add_var(f"{tag}c[{a},{b}]", c_lo, 1.0)
    wc_box = [vv_lo * c_lo, vv_lo * 1.0, vv_hi * c_lo, vv_hi * 1.0]
    ws_box = [vv_lo * s_lo, vv_lo * s_hi, vv_hi * s_lo, vv_hi * s_hi]
    wc = prog.add_var(f"{tag}wc[{a},{b}]", min(wc_box), max(wc_box))
    ws = prog.add_var(f"{tag}ws[{a},{b}]", min(ws_box), max(ws_box))

    t = {int(theta[a]): 1.0, int(theta[b]): -1.0}
    _add_rows(prog, mccormick(vb[a, 0], vb[a, 1], vb[b, 0], vb[b, 1]),
              {"x": _var(v[a]), "y": _var(v[b]), "w": _var(vv)}, f"{block}:mccormick-vv")
    trig_rows, cos_upper = trig_envelopes(lo, hi)
    names = {"t": t, "s": _var(s), "c": _var(c)}
    _add_rows(prog, trig_rows, names, f"{block}:trig")
    _add_quad(prog, cos_upper, names, f"{block}:trig")
    _add_rows(prog, mccormick(vv_lo, vv_hi, c_lo, 1.0),
              {"x": _var(vv), "y": _var(c), "w": _var(wc)}, f"{block}:mccormick-wc")
    _add_rows(prog, mccormick(vv_lo, vv_hi, s_lo, s_hi),
              {"x": _var(vv), "y": _var(s), "w": _var(ws)}, f"{block}:mccormick-ws")
    return {"vv": vv, "s": s, "c": c, "wc": wc, "ws": ws}


def add_qc_block(
    prog: ConicProgram,
    spec: MicrogridSpec,
    tag: str = "",
    block: str = "qc",
    symmetric: bool = True,
    bus_vars: Optional[dict[str, np.ndarray]] = None,
) -> QcLayout:
    """Instantiate the relaxation of one snapshot inside ``prog``.

    Args:
        prog: Program receiving variables and rows
        spec: Grid with finite voltage and angle boxes
        tag: Prefix for variable names (e.g. the time step)
        block: Prefix for constraint block labels
        symmetric: Build envelopes once per line and derive the reversed direction
        bus_vars: Existing p, q, v, theta variables to reuse instead of creating new ones

    Raises:
        EnvelopeError: Missing or invalid bounds
    """
    n = spec.n_buses
    vb, tb = spec.v_bounds, spec.theta_bounds
    if not (np.all(np.isfinite(vb)) and np.all(np.isfinite(tb))):
        raise EnvelopeError("QC relaxation needs finite voltage and angle bounds at every bus")
    if np.any(vb[:, 0] < 0):
        raise EnvelopeError("voltage lower bounds must be nonnegative")

    if bus_vars is None:
        p = prog.add_vars(f"{tag}p", n)
        q = prog.add_vars(f"{tag}q", n)
        v = prog.add_vars(f"{tag}v", n, vb[:, 0], vb[:, 1])
        theta = prog.add_vars(f"{tag}theta", n, tb[:, 0], tb[:, 1])
    else:
        p, q, v, theta = (np.asarray(bus_vars[k], dtype=int) for k in ("p", "q", "v", "theta"))

    vsq = prog.add_vars(f"{tag}vsq", n, vb[:, 0] ** 2, vb[:, 1] ** 2)
    for i in range(n):
        lower, upper = square_envelope(vb[i, 0], vb[i, 1])
        names = {"x": _var(v[i]), "X": _var(vsq[i])}
        _add_quad(prog, lower, names, f"{block}:square")
        _add_rows(prog, [upper], names, f"{block}:square")

    pairs = spec.line_pairs()
    L = len(pairs)
    fw = {k: np.zeros(L, dtype=int) for k in ("vv", "s", "c", "wc", "ws")}
    rev = {k: np.zeros(L, dtype=int) for k in ("vv", "s", "c", "wc", "ws")} if not symmetric else None
    p_fw = np.zeros(L, dtype=int)
    q_fw = np.zeros(L, dtype=int)
    p_bw = np.zeros(L, dtype=int)
    q_bw = np.zeros(L, dtype=int)
    cur = np.zeros(L, dtype=int)

    for k, (i, j, line) in enumerate(pairs):
        g, b = line.g, line.b
        f = _add_pair_envelopes(prog, spec, tag, i, j, v, theta, block)
        for key, idx in f.items():
            fw[key][k] = idx
        if symmetric:
            r_wc, r_ws, ws_sign = f["wc"], f["ws"], -1.0
        else:
            r = _add_pair_envelopes(prog, spec, tag, j, i, v, theta, block)
            for key, idx in r.items():
                rev[key][k] = idx
            for key, sign in (("vv", 1.0), ("s", -1.0), ("c", 1.0), ("wc", 1.0), ("ws", -1.0)):
                prog.add_linear({r[key]: 1.0, f[key]: -sign}, 0.0, "==", f"{block}:reverse")
            r_wc, r_ws, ws_sign = r["wc"], r["ws"], 1.0

        p_fw[k] = prog.add_var(f"{tag}pf[{i},{j}]")
        q_fw[k] = prog.add_var(f"{tag}qf[{i},{j}]")
        p_bw[k] = prog.add_var(f"{tag}pf[{j},{i}]")
        q_bw[k] = prog.add_var(f"{tag}qf[{j},{i}]")
        cur[k] = prog.add_var(f"{tag}l[{i},{j}]")
        wc, ws = f["wc"], f["ws"]
        flows = f"{block}:flow"
        prog.add_linear({p_fw[k]: 1.0, vsq[i]: -g, wc: g, ws: b}, 0.0, "==", flows)
        prog.add_linear({q_fw[k]: 1.0, vsq[i]: b, wc: -b, ws: g}, 0.0, "==", flows)
        # reversed direction: sin(theta_ji) = -sin(theta_ij)
        prog.add_linear({p_bw[k]: 1.0, vsq[j]: -g, r_wc: g, r_ws: b * ws_sign}, 0.0, "==", flows)
        prog.add_linear({q_bw[k]: 1.0, vsq[j]: b, r_wc: -b, r_ws: g * ws_sign}, 0.0, "==", flows)

        definition, norm_terms, rhs = current_soc_constraint(g, b)
        for pp, qq, pr, qr, X in ((p_fw[k], q_fw[k], p_bw[k], q_bw[k], vsq[i]),
                                  (p_bw[k], q_bw[k], p_fw[k], q_fw[k], vsq[j])):
            names = {"p": _var(pp), "q": _var(qq), "pr": _var(pr), "qr": _var(qr), "X": _var(X), "l": _var(cur[k])}
            prog.add_soc([(_resolve(a, names), c0) for a, c0 in norm_terms], _resolve(rhs, names), 0.0, f"{block}:soc")
        sym, d_rhs = definition
        names = {"p": _var(p_fw[k]), "q": _var(q_fw[k]), "pr": _var(p_bw[k]), "qr": _var(q_bw[k]), "l": _var(cur[k])}
        prog.add_linear(_resolve(sym, names), d_rhs, "==", f"{block}:current")

    for bus in range(n):
        y = spec.ground_admittance[bus]
        p_row: Coeffs = {int(p[bus]): 1.0, int(vsq[bus]): -y.real}
        q_row: Coeffs = {int(q[bus]): 1.0, int(vsq[bus]): y.imag}
        for k, (i, j, _) in enumerate(pairs):
            if bus == i:
                p_row[int(p_fw[k])] = -1.0
                q_row[int(q_fw[k])] = -1.0
            elif bus == j:
                p_row[int(p_bw[k])] = -1.0
                q_row[int(q_bw[k])] = -1.0
        prog.add_linear(p_row, 0.0, "==", f"{block}:nodal")
        prog.add_linear(q_row, 0.0, "==", f"{block}:nodal")

    return QcLayout(p, q, v, theta, vsq, pairs, fw["vv"], fw["s"], fw["c"], fw["wc"], fw["ws"],
                    p_fw, q_fw, p_bw, q_bw, cur, rev)


@dataclass
class QcRelaxation:
    """Relaxation of a single snapshot as a standalone program."""
    program: ConicProgram
    layout: QcLayout

    @property
    def n_qc(self) -> int:
        return self.layout.n_qc


def assemble_qc(spec: MicrogridSpec, symmetric: bool = True) -> QcRelaxation:
    """Build g_QC for one snapshot with its lift layout (see module docstring)."""
    prog = ConicProgram("qc-relaxation")
    layout = add_qc_block(prog, spec, symmetric=symmetric)
    logger.debug("assembled QC relaxation: %d variables, %d rows, n_QC=%d",
                 prog.n_vars, len(prog.constraints), layout.n_qc)
    return QcRelaxation(prog, layout)


@dataclass
class QcLift:
    """Exact values of every lift variable at an AC state.

    Attributes:
        z: The lifted state
        vsq: Per-bus v_i^2
        vv, s_theta, c_theta: Per-line v_i v_j, sin and cos of theta_ij
        wc, ws: Per-line (v_i v_j) cos theta_ij and (v_i v_j) sin theta_ij
        line_p, line_q: (L, 2) flows in the i -> j and j -> i directions
        current: Per-line squared current magnitude
    """
    z: GridAlgebraicState
    vsq: np.ndarray
    vv: np.ndarray
    s_theta: np.ndarray
    c_theta: np.ndarray
    wc: np.ndarray
    ws: np.ndarray
    line_p: np.ndarray
    line_q: np.ndarray
    current: np.ndarray

    def assign(self, layout: QcLayout, x: np.ndarray) -> np.ndarray:
        """Write the lift into assignment vector ``x`` (in place) and return it."""
        z = self.z
        for idx, val in ((layout.p, z.p), (layout.q, z.q), (layout.v, z.v), (layout.theta, z.theta),
                         (layout.vsq, self.vsq), (layout.vv, self.vv), (layout.s, self.s_theta),
                         (layout.c, self.c_theta), (layout.wc, self.wc), (layout.ws, self.ws),
                         (layout.p_fw, self.line_p[:, 0]), (layout.q_fw, self.line_q[:, 0]),
                         (layout.p_bw, self.line_p[:, 1]), (layout.q_bw, self.line_q[:, 1]),
                         (layout.l, self.current)):
            x[idx] = val
        if layout.reverse:
            rev = layout.reverse
            x[rev["vv"]] = self.vv
            x[rev["s"]] = -self.s_theta
            x[rev["c"]] = self.c_theta
            x[rev["wc"]] = self.wc
            x[rev["ws"]] = -self.ws
        return x


def lift_ac_point(z: GridAlgebraicState, spec: MicrogridSpec) -> QcLift:
    """Exact lift of an in-box state.

    Raises:
        OutOfBounds: z lies outside the voltage or angle boxes
    """
    vb, tb = spec.v_bounds, spec.theta_bounds
    if (np.any(z.v < vb[:, 0] - LIFT_BOX_TOL) or np.any(z.v > vb[:, 1] + LIFT_BOX_TOL)
            or np.any(z.theta < tb[:, 0] - LIFT_BOX_TOL) or np.any(z.theta > tb[:, 1] + LIFT_BOX_TOL)):
        raise OutOfBounds("state outside the voltage/angle boxes cannot be lifted")
    pairs = spec.line_pairs()
    L = len(pairs)
    vv, s, c = np.zeros(L), np.zeros(L), np.zeros(L)
    line_p, line_q, cur = np.zeros((L, 2)), np.zeros((L, 2)), np.zeros(L)
    for k, (i, j, line) in enumerate(pairs):
        t = z.theta[i] - z.theta[j]
        vv[k] = z.v[i] * z.v[j]
        s[k], c[k] = math.sin(t), math.cos(t)
        oriented = Line(i, j, line.g, line.b)
        (p_ij, q_ij), (p_ji, q_ji) = branch_flow(z, oriented)
        line_p[k] = (p_ij, p_ji)
        line_q[k] = (q_ij, q_ji)
        cur[k] = line.g * (p_ij + p_ji) - line.b * (q_ij + q_ji)
    return QcLift(z, z.v ** 2, vv, s, c, vv * c, vv * s, line_p, line_q, cur)


def dump_qc(spec: MicrogridSpec, path: Path, symmetric: bool = True) -> Path:
    """Write the single-snapshot relaxation in the program text format."""
    return dump_program(assemble_qc(spec, symmetric).program, path)
