import math

import numpy as np
import pytest

from app.config import SolverSettings
from app.grid import conic
from app.grid.conic import CompiledProgram, ConicProgram, Lin, SolveResult, Status, retry_ladder, solve, solve_with_retries, square, to_cbf, validate


def _box_program(lo=1.0, hi=2.0):
    prog = ConicProgram()
    (x,) = prog.add_variables("x", 1, lb=lo, ub=hi)
    prog.set_objective(square(prog.var(x)))
    return prog


class TestExpressions:
    def test_lin_arithmetic(self):
        a = Lin.var(0) + 2.0 * Lin.var(1) - 3.0
        z = np.array([1.0, 2.0])
        assert a.value(z) == pytest.approx(2.0)
        assert (-a).value(z) == pytest.approx(-2.0)
        merged = (Lin.var(0) + Lin.var(0) - Lin.var(0)).coalesce()
        assert merged.idx.tolist() == [0]
        assert merged.coef.tolist() == [1.0]

    def test_square_expands_constants(self):
        q = square(Lin.var(0) - 1.0)
        support, Q, lin = q.expand()
        assert support.tolist() == [0]
        assert Q.tolist() == [[1.0]]
        assert lin.const == pytest.approx(1.0)
        assert lin.coef.tolist() == [-2.0]
        assert q.value(np.array([3.0])) == pytest.approx(4.0)

    def test_square_of_square_rejected(self):
        with pytest.raises(TypeError):
            square(square(Lin.var(0)))

    def test_square_of_numbers(self):
        np.testing.assert_array_equal(square(np.array([2.0, -3.0])), [4.0, 9.0])


class TestProgram:
    def test_quadratic_row_recorded(self):
        prog = ConicProgram()
        x, y = prog.add_variables("z", 2)
        prog.add_le(square(prog.var(x)) + prog.var(y), 1.0, tag="q")
        prog.add_le(prog.var(x), 3.0, tag="lin")
        prog.add_eq(prog.var(y), 0.5, tag="eq")
        assert prog.n_quadratic_rows == 1
        assert prog.n_linear_rows == 2
        assert prog.tags() == {"q": 1, "lin": 1, "eq": 1}
        z = np.array([1.0, 0.5])
        assert prog.max_violation(z) == pytest.approx(0.5)
        assert prog.row_violations(z)["lin"] == 0.0

    def test_quadratic_equality_rejected(self):
        prog = ConicProgram()
        (x,) = prog.add_variables("x", 1)
        with pytest.raises(ValueError):
            prog.add_eq(square(prog.var(x)), 1.0)

    def test_block_width_checked(self):
        prog = ConicProgram()
        prog.add_variables("x", 2)
        with pytest.raises(ValueError):
            prog.add_block(np.eye(3), np.zeros(3))


class TestValidate:
    def test_clean_program(self):
        assert validate(_box_program()) == []

    def test_non_psd_row(self):
        prog = ConicProgram()
        x, y = prog.add_variables("z", 2)
        prog.add_le(square(prog.var(x)) - square(prog.var(y)), 1.0, tag="saddle")
        problems = validate(prog)
        assert any("not PSD" in p and "saddle" in p for p in problems)

    def test_dangling_variable(self):
        prog = _box_program()
        prog.add_variables("unused", 1)
        assert validate(prog) == ["variable unused[0] appears in no row"]

    def test_empty_bounds(self):
        prog = _box_program(lo=2.0, hi=1.0)
        assert "variable bounds are empty" in validate(prog)


class TestSolve:
    def test_minimum_on_bound(self):
        result = solve(_box_program())
        assert result.optimal
        assert result.z[0] == pytest.approx(1.0, abs=1e-6)
        assert result.objective == pytest.approx(1.0, abs=1e-6)
        assert result.max_violation <= 1e-6

    def test_infeasible(self):
        prog = _box_program()
        prog.add_ge(prog.var(0), 3.0)
        result = solve(prog)
        assert result.status is Status.INFEASIBLE
        assert result.z is None
        assert math.isnan(result.objective)

    def test_quadratic_row_as_cone(self):
        prog = ConicProgram()
        x, y = prog.add_variables("z", 2)
        prog.add_le(square(prog.var(x)) + square(prog.var(y)), 1.0)
        prog.set_objective(-1.0 * (prog.var(x) + prog.var(y)))
        result = solve(prog)
        assert result.optimal
        np.testing.assert_allclose(result.z, [math.sqrt(0.5)] * 2, atol=1e-5)

    def test_soc_row(self):
        prog = ConicProgram()
        x, y, t = prog.add_variables("z", 3)
        prog.add_soc([prog.var(x) - 3.0, prog.var(y) - 4.0], prog.var(t))
        prog.set_objective(prog.var(t))
        result = solve(prog)
        assert result.optimal
        assert result.objective == pytest.approx(0.0, abs=1e-5)

    def test_fixed_parameters_reuse(self):
        prog = ConicProgram()
        x, y = prog.add_variables("z", 2)
        prog.add_le(square(prog.var(x)) + square(prog.var(y)), 1.0)
        compiled = CompiledProgram(prog, fixed=np.array([x]), objective=0.0)
        assert compiled.solve(np.array([0.5])).optimal
        assert compiled.solve(np.array([1.5])).status is Status.INFEASIBLE
        with pytest.raises(ValueError):
            compiled.solve()


class TestRecheck:
    def test_default_recheck_tolerance(self):
        assert SolverSettings().recheck_tol == pytest.approx(1e-7)

    def test_violated_rows_downgrade_optimal(self):
        prog = _box_program()
        prog.max_violation = lambda z: 1e-4
        result = solve(prog)
        assert result.status is Status.NUMERICAL_FAILURE
        assert result.z is None
        assert result.max_violation == pytest.approx(1e-4)

    def test_loose_recheck_accepts(self):
        prog = _box_program()
        prog.max_violation = lambda z: 1e-4
        assert solve(prog, SolverSettings(recheck_tol=1e-3)).optimal


class TestRetryLadder:
    def test_tight_rung_first(self, monkeypatch):
        monkeypatch.setattr(conic.cp, "installed_solvers", lambda: ["CLARABEL", "CVXOPT"])
        ladder = retry_ladder(SolverSettings())
        tight, cleanup = ladder[0]
        assert tight.solver == "CLARABEL"
        assert tight.feasibility_tol == pytest.approx(1e-10)
        assert tight.gap_tol == pytest.approx(1e-10)
        assert tight.max_iter == 1000
        assert cleanup == pytest.approx(1e-9)
        assert [s.solver for s, _ in ladder[1:]] == ["CVXOPT"]

    def test_skips_primary_and_missing_solvers(self, monkeypatch):
        monkeypatch.setattr(conic.cp, "installed_solvers", lambda: ["CLARABEL", "ECOS"])
        settings = SolverSettings(fallback_solvers=["clarabel", "CVXOPT", "ECOS"])
        assert [s.solver for s, _ in retry_ladder(settings)] == ["CLARABEL", "ECOS"]

    def test_falls_through_to_fallback(self, monkeypatch):
        monkeypatch.setattr(conic.cp, "installed_solvers", lambda: ["CLARABEL", "CVXOPT"])
        seen = []

        def fake_solve(prog, settings=None, cleanup=None):
            seen.append((settings.solver, settings.feasibility_tol))
            if settings.solver == "CVXOPT":
                return SolveResult(status=Status.OPTIMAL, z=np.zeros(1), objective=2.0, wall_time=1.0)
            return SolveResult(status=Status.NUMERICAL_FAILURE, wall_time=1.0, solver_status="optimal_inaccurate")

        monkeypatch.setattr(conic, "solve", fake_solve)
        result = solve_with_retries(_box_program())
        assert result.optimal
        assert [name for name, _ in seen] == ["CLARABEL", "CLARABEL", "CVXOPT"]
        assert seen[1][1] < seen[0][1]
        assert result.wall_time == pytest.approx(3.0)

    def test_infeasible_is_not_retried(self, monkeypatch):
        calls = []

        def fake_solve(prog, settings=None, cleanup=None):
            calls.append(settings.solver)
            return SolveResult(status=Status.INFEASIBLE)

        monkeypatch.setattr(conic, "solve", fake_solve)
        assert solve_with_retries(_box_program()).status is Status.INFEASIBLE
        assert calls == ["CLARABEL"]


def test_cbf_dump():
    prog = _box_program()
    prog.add_le(square(prog.var(0)), 3.0)
    text = to_cbf(prog)
    assert text.startswith("VER\n3\n")
    assert "QR 3" in text
    assert "OBJSENSE\nMIN" in text
    assert "VAR\n2 1\nF 2" in text
