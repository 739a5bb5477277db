"""Tests for the conic program container, the continuous solve and the modeling helpers."""

import math

import numpy as np
import pytest

from microgrid_nmpc.conic import (
    ConicProgram,
    ConstraintKind,
    ConvexConstraint,
    RelaxationModel,
    SolveStatus,
    VarKind,
    abs_value_epigraph,
    big_m_indicator,
    dump_program,
    kkt_residuals,
    load_program,
    solve_continuous,
)
from microgrid_nmpc.errors import EncodingError, EnvelopeError


def test_linear_program_optimum():
    prog = ConicProgram("lp")
    x = prog.add_var("x", 0.0, 1.0)
    y = prog.add_var("y", 0.0, 1.0)
    prog.add_linear({x: 1.0, y: 1.0}, 1.0)
    prog.add_objective({x: -2.0, y: -1.0})
    sol = solve_continuous(prog)
    assert sol.ok
    assert sol.objective == pytest.approx(-2.0, abs=1e-6)
    assert sol.x[x] == pytest.approx(1.0, abs=1e-6)
    assert kkt_residuals(prog, sol).max() <= 1e-5


def test_second_order_cone_optimum():
    prog = ConicProgram("soc")
    x = prog.add_var("x")
    y = prog.add_var("y")
    prog.add_soc([({x: 1.0}, 0.0), ({y: 1.0}, 0.0)], {}, 1.0)
    prog.add_objective({x: -1.0, y: -1.0})
    sol = solve_continuous(prog)
    assert sol.objective == pytest.approx(-math.sqrt(2.0), abs=1e-6)
    np.testing.assert_allclose(sol.x, [1 / math.sqrt(2.0)] * 2, atol=1e-5)
    assert kkt_residuals(prog, sol).max() <= 1e-5


def test_quadratic_row_optimum():
    prog = ConicProgram("quad")
    x = prog.add_var("x")
    y = prog.add_var("y", 0.5, 0.5)
    # (x - 1)^2 + y <= 1.5
    prog.add_quadratic([(1.0, {x: 1.0}, -1.0)], {y: 1.0}, 1.5)
    prog.add_objective({x: -1.0}, constant=3.0)
    sol = solve_continuous(prog)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert sol.x[x] == pytest.approx(2.0, abs=1e-5)
    assert kkt_residuals(prog, sol).max() <= 1e-5


def test_equality_and_ge_rows():
    prog = ConicProgram()
    x = prog.add_var("x")
    y = prog.add_var("y", ub=0.5)
    prog.add_linear({x: 1.0, y: 1.0}, 2.0, "==")
    prog.add_linear({x: 1.0}, 1.0, ">=")
    prog.add_objective({x: 1.0})
    assert prog.constraints[1].kind is ConstraintKind.LINEAR_LE
    assert prog.constraints[1].coeffs == {x: -1.0}
    sol = solve_continuous(prog)
    assert sol.objective == pytest.approx(1.5, abs=1e-6)
    assert kkt_residuals(prog, sol).max() <= 1e-5


def test_infeasible_program_reported():
    prog = ConicProgram()
    x = prog.add_var("x", 0.0, 1.0)
    prog.add_linear({x: -1.0}, -2.0)
    sol = solve_continuous(prog)
    assert sol.status is SolveStatus.INFEASIBLE
    assert not sol.ok


def test_program_validation():
    prog = ConicProgram()
    with pytest.raises(EncodingError):
        prog.add_var("x", 2.0, 1.0)
    x = prog.add_var("x", 0.0, 1.0)
    with pytest.raises(ValueError):
        prog.add_linear({x: 1.0}, 0.0, "<")
    with pytest.raises(EncodingError):
        prog.set_bounds(x, lb=3.0)
    with pytest.raises(ValueError):
        ConvexConstraint(ConstraintKind.QUADRATIC_LE, {}, 0.0, ((-1.0, {x: 1.0}, 0.0),))
    b = prog.add_var("b", -5.0, 5.0, VarKind.BINARY)
    assert (prog.lb[b], prog.ub[b]) == (0.0, 1.0)


def test_block_violations_names_blocks_and_bounds():
    prog = ConicProgram()
    x = prog.add_vars("x", 2, 0.0, 1.0)
    prog.add_linear({int(x[0]): 1.0}, 0.5, "<=", "first")
    prog.add_linear({int(x[1]): 1.0}, 0.5, "<=", "second")
    report = prog.block_violations(np.array([0.2, 0.9]))
    assert report == {"second": pytest.approx(0.4)}
    report = prog.block_violations(np.array([0.2, 1.5]))
    assert report["bounds:x"] == pytest.approx(0.5)
    assert prog.max_violation(np.array([0.2, 0.4])) == 0.0
    assert prog.blocks() == ["first", "second"]


def test_big_m_indicator_enumeration():
    prog = ConicProgram()
    x = prog.add_var("x", 0.0, 10.0)
    s = prog.add_var("s", kind=VarKind.BINARY)
    rows = big_m_indicator(prog, s, family0=[({x: 1.0}, 2.0)], family1=[({x: -1.0}, -5.0)], block="switch")
    assert prog.constraints[rows[0]].coeffs[s] == pytest.approx(-8.0)
    assert prog.constraints[rows[1]].coeffs[s] == pytest.approx(5.0)
    for sv in (0.0, 1.0):
        for xv in np.linspace(0.0, 10.0, 41):
            point = np.array([xv, sv])
            feasible = prog.max_violation(point) <= 1e-12
            implied = xv <= 2.0 if sv == 0.0 else xv >= 5.0
            assert feasible == implied


def test_big_m_explicit_value_kept():
    prog = ConicProgram()
    x = prog.add_var("x", 0.0, 10.0)
    s = prog.add_var("s", kind=VarKind.BINARY)
    rows = big_m_indicator(prog, s, family0=[({x: 1.0}, 2.0)], m0=[20.0])
    assert prog.constraints[rows[0]].coeffs[s] == pytest.approx(-20.0)


def test_big_m_errors():
    prog = ConicProgram()
    x = prog.add_var("x", 0.0, 10.0)
    free = prog.add_var("free")
    s = prog.add_var("s", kind=VarKind.BINARY)
    with pytest.raises(EncodingError):
        big_m_indicator(prog, x, family0=[({x: 1.0}, 2.0)])
    with pytest.raises(EncodingError):
        big_m_indicator(prog, s, family0=[({free: 1.0}, 2.0)])
    with pytest.raises(EncodingError):
        big_m_indicator(prog, s, family0=[({x: 1.0}, 2.0)], m0=[1.0])
    with pytest.raises(EncodingError):
        big_m_indicator(prog, s, family0=[({x: 1.0}, 2.0)], m0=[8.0, 8.0])


def test_small_big_m_reports_an_encoding_error():
    prog = ConicProgram()
    x = prog.add_var("x", 0.0, 10.0)
    s = prog.add_var("s", kind=VarKind.BINARY)
    with pytest.raises(EncodingError, match="below the box supremum") as excinfo:
        big_m_indicator(prog, s, family0=[({x: 1.0}, 2.0)], m0=[1.0])
    assert not isinstance(excinfo.value, EnvelopeError)
    assert (excinfo.value.category, excinfo.value.exit_code) == ("encoding", 10)


def test_abs_value_epigraph():
    prog = ConicProgram()
    x = prog.add_var("x", -3.0, -3.0)
    t = abs_value_epigraph(prog, x)
    prog.add_objective({t: 1.0})
    assert prog.ub[t] == 3.0
    sol = solve_continuous(prog)
    assert sol.objective == pytest.approx(3.0, abs=1e-6)


def test_dump_and_load_preserve_program(tmp_path):
    prog = ConicProgram("mixed program")
    x = prog.add_var("x", -1.0, 2.0)
    n = prog.add_var("n", 0.0, 4.0, VarKind.INTEGER)
    b = prog.add_var("on[0]", kind=VarKind.BINARY)
    free = prog.add_var("free")
    prog.add_linear({x: 1.0, n: 0.5}, 3.0, "<=", "cap")
    prog.add_linear({free: 1.0, b: -2.0}, 0.25, "==")
    prog.add_quadratic([(0.5, {x: 1.0}, -0.1), (2.0, {n: 1.0, b: 1.0}, 0.0)], {free: 1.0}, 7.0, "quad rows")
    prog.add_soc([({x: 1.0}, 0.0), ({free: 2.0}, 1.0)], {n: 1.0}, 0.5, "cone")
    prog.add_objective({x: 1.0, n: -1.0}, constant=2.5)

    loaded = load_program(dump_program(prog, tmp_path / "sub" / "prog.txt"))
    assert loaded.name == "mixed_program"
    assert loaded.var_names == prog.var_names
    assert loaded.kinds == prog.kinds
    assert loaded.lb == prog.lb and loaded.ub == prog.ub
    assert loaded.objective == prog.objective
    assert loaded.objective_constant == prog.objective_constant
    assert [c.kind for c in loaded.constraints] == [c.kind for c in prog.constraints]
    assert [c.block for c in loaded.constraints] == ["cap", "", "quad_rows", "cone"]
    rng = np.random.default_rng(0)
    for _ in range(10):
        point = rng.normal(size=prog.n_vars)
        for a, c in zip(prog.constraints, loaded.constraints):
            assert a.slack(point) == pytest.approx(c.slack(point), abs=1e-12)


def test_load_rejects_unknown_record(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("NAME p\nFOO 1 2\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_program(path)


def box_lp(rng, n):
    prog = ConicProgram("box lp")
    lo = rng.uniform(-2.0, 0.0, n)
    hi = lo + rng.uniform(0.5, 2.0, n)
    x = prog.add_vars("x", n, lo, hi)
    c = rng.normal(size=n)
    prog.add_linear({int(j): 1.0 for j in x}, float(hi.sum()) + 1.0, "<=", "redundant")
    prog.add_objective({int(j): float(v) for j, v in zip(x, c)})
    return prog, float(np.minimum(c * lo, c * hi).sum())


def simplex_lp(rng, n):
    prog = ConicProgram("simplex lp")
    x = prog.add_vars("x", n, 0.0)
    c = rng.normal(size=n)
    prog.add_linear({int(j): 1.0 for j in x}, 1.0, "==", "simplex")
    prog.add_objective({int(j): float(v) for j, v in zip(x, c)})
    return prog, float(c.min())


def soc_ball(rng, n):
    prog = ConicProgram("ball")
    x = prog.add_vars("x", n)
    a = rng.normal(size=n)
    r = rng.uniform(0.5, 2.0)
    c = rng.normal(size=n)
    prog.add_soc([({int(j): 1.0}, -float(ai)) for j, ai in zip(x, a)], {}, r, "ball")
    prog.add_objective({int(j): float(v) for j, v in zip(x, c)})
    return prog, float(c @ a - r * np.linalg.norm(c))


def ellipsoid(rng, n):
    prog = ConicProgram("ellipsoid")
    x = prog.add_vars("x", n)
    a = rng.normal(size=n)
    w = rng.uniform(0.5, 3.0, n)
    r = rng.uniform(0.5, 2.0)
    c = rng.normal(size=n)
    prog.add_quadratic([(float(wi), {int(j): 1.0}, -float(ai)) for j, wi, ai in zip(x, w, a)], {}, r ** 2, "ellipsoid")
    prog.add_objective({int(j): float(v) for j, v in zip(x, c)})
    return prog, float(c @ a - r * math.sqrt(float(np.sum(c ** 2 / w))))


@pytest.mark.parametrize("seed", range(100))
def test_random_continuous_programs_satisfy_kkt(seed):
    rng = np.random.default_rng(seed)
    family = (box_lp, simplex_lp, soc_ball, ellipsoid)[seed % 4]
    prog, expected = family(rng, int(rng.integers(2, 6)))
    sol = solve_continuous(prog)
    assert sol.status is SolveStatus.OPTIMAL
    assert sol.objective == pytest.approx(expected, abs=1e-6)
    assert kkt_residuals(prog, sol).max() <= 1e-6


def cone_mix():
    prog = ConicProgram("cone mix")
    x = prog.add_vars("x", 3, -2.0, 2.0)
    on = prog.add_var("on", kind=VarKind.BINARY)
    x0, x1, x2 = (int(j) for j in x)
    prog.add_quadratic([(1.0, {x0: 1.0}, -0.5), (2.0, {x1: 1.0, x2: -1.0}, 0.0)], {on: 0.5}, 1.5, "quad")
    prog.add_soc([({x0: 1.0}, 0.0), ({x1: 1.0}, 0.2), ({x2: 1.0}, 0.0)], {on: 1.0}, 1.0, "cone")
    prog.add_soc([({x2: 1.0, x0: 1.0}, 0.0)], {}, 1.5, "narrow")
    prog.add_linear({x0: 1.0, x1: 1.0, x2: 1.0}, 1.0, "<=", "sum")
    prog.add_objective({x0: -1.0, x1: -2.0, x2: 0.5, on: 0.3})
    return prog


def test_stacked_cones_match_row_model():
    prog = cone_mix()
    plain = RelaxationModel(prog)
    stacked = RelaxationModel(prog, stacked=True)
    assert stacked.quad == [] and stacked.soc == []
    for fixed in (None, [0.0], [1.0]):
        a = plain.solve(fixed, fixed)
        b = stacked.solve(fixed, fixed)
        assert a.status is b.status is SolveStatus.OPTIMAL
        assert b.objective == pytest.approx(a.objective, abs=1e-6)
        assert prog.max_violation(b.x) <= 1e-6
        assert b.duals == {}


def test_kkt_needs_row_multipliers():
    prog = cone_mix()
    sol = RelaxationModel(prog, stacked=True).solve()
    with pytest.raises(ValueError):
        kkt_residuals(prog, sol)
