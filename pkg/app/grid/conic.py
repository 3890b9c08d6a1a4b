"""Solver-agnostic convex QCQP container and its cvxpy lowering.

Rows are kept in the form the assembly produces them: linear rows ``a'z <= b`` / ``a'z = b``,
convex quadratic rows ``z'Qz + a'z + c <= 0`` and second-order cones ``||Gz + h|| <= g'z + e``.
Quadratic rows are lowered to rotated cones at solve time.
"""

import logging
import math
import numbers
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

from app.config import SolverSettings

logger = logging.getLogger(__name__)

PSD_TOL = 1e-9


class Lin:
    """Sparse affine expression ``sum coef[i] * z[idx[i]] + const``."""

    __array_ufunc__ = None
    __slots__ = ("idx", "coef", "const")

    def __init__(self, idx: Iterable[int] = (), coef: Iterable[float] = (), const: float = 0.0) -> None:
        self.idx = np.asarray(idx, dtype=int).ravel()
        self.coef = np.asarray(coef, dtype=float).ravel()
        self.const = float(const)

    @classmethod
    def var(cls, index: int, scale: float = 1.0) -> "Lin":
        return cls([index], [scale])

    def coalesce(self) -> "Lin":
        if self.idx.size == 0:
            return self
        uniq, inv = np.unique(self.idx, return_inverse=True)
        coef = np.zeros(len(uniq))
        np.add.at(coef, inv, self.coef)
        keep = coef != 0.0
        return Lin(uniq[keep], coef[keep], self.const)

    def value(self, z: np.ndarray) -> float:
        return float(self.coef @ z[self.idx]) + self.const if self.idx.size else self.const

    def __add__(self, other):
        if isinstance(other, Lin):
            return Lin(np.concatenate([self.idx, other.idx]), np.concatenate([self.coef, other.coef]), self.const + other.const)
        if isinstance(other, Quad):
            return other + self
        if isinstance(other, numbers.Real):
            return Lin(self.idx, self.coef, self.const + float(other))
        return NotImplemented

    __radd__ = __add__

    def __neg__(self) -> "Lin":
        return Lin(self.idx, -self.coef, -self.const)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            s = float(other)
            return Lin(self.idx, self.coef * s, self.const * s)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * (1.0 / float(other))


class Quad:
    """``sum w_k * lin_k^2 + lin``."""

    __array_ufunc__ = None
    __slots__ = ("squares", "lin")

    def __init__(self, squares: Sequence[tuple[float, Lin]] = (), lin: Optional[Lin] = None) -> None:
        self.squares = list(squares)
        self.lin = lin if lin is not None else Lin()

    def __add__(self, other):
        if isinstance(other, Quad):
            return Quad(self.squares + other.squares, self.lin + other.lin)
        if isinstance(other, (Lin, numbers.Real)):
            return Quad(self.squares, self.lin + other)
        return NotImplemented

    __radd__ = __add__

    def __neg__(self) -> "Quad":
        return Quad([(-w, e) for w, e in self.squares], -self.lin)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            s = float(other)
            return Quad([(w * s, e) for w, e in self.squares], self.lin * s)
        return NotImplemented

    __rmul__ = __mul__

    def value(self, z: np.ndarray) -> float:
        return sum(w * e.value(z) ** 2 for w, e in self.squares) + self.lin.value(z)

    def expand(self) -> tuple[np.ndarray, np.ndarray, Lin]:
        """Return ``(support, Q_sub, linear)`` with the square constants folded into ``linear``."""
        lin = self.lin
        parts = [e.coalesce() for _, e in self.squares]
        support = np.unique(np.concatenate([p.idx for p in parts])) if parts else np.zeros(0, dtype=int)
        pos = {int(j): k for k, j in enumerate(support)}
        Q = np.zeros((len(support), len(support)))
        for (w, _), e in zip(self.squares, parts):
            if e.idx.size:
                loc = np.array([pos[int(j)] for j in e.idx])
                Q[np.ix_(loc, loc)] += w * np.outer(e.coef, e.coef)
                lin = lin + Lin(e.idx, 2.0 * w * e.const * e.coef)
            lin = lin + w * e.const**2
        return support, Q, lin.coalesce()


def square(x):
    if isinstance(x, Lin):
        return Quad([(1.0, x)])
    if isinstance(x, Quad):
        raise TypeError("cannot square a quadratic expression")
    return np.square(x)


Expr = Union[Lin, Quad, float]


@dataclass
class QuadRow:
    support: np.ndarray
    Q_sub: np.ndarray
    a: Lin
    tag: str = ""

    @property
    def c(self) -> float:
        return self.a.const

    def Q(self, n: int) -> sp.csr_matrix:
        rows, cols = np.meshgrid(self.support, self.support, indexing="ij")
        return sp.csr_matrix((self.Q_sub.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n))

    def value(self, z: np.ndarray) -> float:
        zs = z[self.support]
        return float(zs @ self.Q_sub @ zs) + self.a.value(z)


@dataclass
class SocRow:
    """``||G z + h|| <= g'z + e`` with ``G`` given row by row as affine expressions."""

    terms: list[Lin]
    bound: Lin
    tag: str = ""

    def value(self, z: np.ndarray) -> float:
        return math.hypot(*[t.value(z) for t in self.terms]) - self.bound.value(z)



@dataclass
class LinearBlock:
    """Rows ``A z <= rhs`` (``sense == "le"``) or ``A z == rhs``."""

    A: sp.csr_matrix
    rhs: np.ndarray
    sense: str
    tag: str = ""

    def padded(self, n: int) -> sp.csr_matrix:
        if self.A.shape[1] == n:
            return self.A
        return sp.csr_matrix((self.A.data, self.A.indices, self.A.indptr), shape=(self.A.shape[0], n))

    def residual(self, z: np.ndarray) -> np.ndarray:
        r = self.padded(z.size) @ z - self.rhs
        return np.abs(r) if self.sense == "eq" else np.maximum(r, 0.0)


def stack_lins(lins: Sequence[Lin], n: int, cleanup: float = 0.0) -> tuple[sp.csr_matrix, np.ndarray]:
    """Coefficient matrix and constant vector of a list of affine expressions."""
    rows, cols, vals = [], [], []
    for r, lin in enumerate(lins):
        mask = np.abs(lin.coef) > cleanup
        rows.extend([r] * int(mask.sum()))
        cols.extend(lin.idx[mask].tolist())
        vals.extend(lin.coef[mask].tolist())
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(lins), n))
    return A, np.array([lin.const for lin in lins], dtype=float)


@dataclass
class ConicProgram:
    names: list[str] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)
    linear: list[LinearBlock] = field(default_factory=list)
    quad_rows: list[QuadRow] = field(default_factory=list)
    soc_rows: list[SocRow] = field(default_factory=list)
    objective: Quad = field(default_factory=Quad)

    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_linear_rows(self) -> int:
        return sum(block.A.shape[0] for block in self.linear)

    @property
    def n_quadratic_rows(self) -> int:
        return len(self.quad_rows) + len(self.soc_rows)

    def add_variables(self, prefix: str, n: int, lb: Union[float, np.ndarray] = -math.inf, ub: Union[float, np.ndarray] = math.inf) -> np.ndarray:
        start = self.n_vars
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (n,))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (n,))
        self.names.extend(f"{prefix}[{i}]" for i in range(n))
        self.lower.extend(lb.tolist())
        self.upper.extend(ub.tolist())
        return np.arange(start, start + n)

    def var(self, index: int) -> Lin:
        return Lin.var(int(index))

    def _add_row(self, lin: Lin, sense: str, tag: str) -> None:
        A, c = stack_lins([lin.coalesce()], self.n_vars)
        self.linear.append(LinearBlock(A=A, rhs=-c, sense=sense, tag=tag))

    def add_le(self, lhs: Expr, rhs: Expr = 0.0, tag: str = "") -> None:
        expr = lhs - rhs
        if isinstance(expr, numbers.Real):
            expr = Lin(const=float(expr))
        if isinstance(expr, Quad) and any(w != 0.0 for w, _ in expr.squares):
            support, Q_sub, lin = expr.expand()
            self.quad_rows.append(QuadRow(support=support, Q_sub=Q_sub, a=lin, tag=tag))
            return
        if isinstance(expr, Quad):
            expr = expr.lin
        self._add_row(expr, "le", tag)

    def add_ge(self, lhs: Expr, rhs: Expr = 0.0, tag: str = "") -> None:
        self.add_le(rhs, lhs, tag)

    def add_eq(self, lhs: Expr, rhs: Expr = 0.0, tag: str = "") -> None:
        expr = lhs - rhs
        if isinstance(expr, numbers.Real):
            expr = Lin(const=float(expr))
        if isinstance(expr, Quad):
            if any(w != 0.0 for w, _ in expr.squares):
                raise ValueError("quadratic equality rows are not convex")
            expr = expr.lin
        self._add_row(expr, "eq", tag)

    def add_block(self, A: sp.spmatrix, rhs: np.ndarray, sense: str = "le", tag: str = "") -> None:
        A = sp.csr_matrix(A)
        if A.shape[1] != self.n_vars:
            raise ValueError(f"block has {A.shape[1]} columns, program has {self.n_vars} variables")
        self.linear.append(LinearBlock(A=A, rhs=np.asarray(rhs, dtype=float).ravel(), sense=sense, tag=tag))

    def add_soc(self, terms: Sequence[Expr], bound: Expr, tag: str = "") -> None:
        as_lin = [t if isinstance(t, Lin) else Lin(const=float(t)) for t in terms]
        bound = bound if isinstance(bound, Lin) else Lin(const=float(bound))
        self.soc_rows.append(SocRow(terms=as_lin, bound=bound, tag=tag))

    def set_objective(self, expr: Expr) -> None:
        self.objective = as_quad(expr)

    def linear_block(self, sense: str) -> tuple[sp.csr_matrix, np.ndarray]:
        blocks = [b for b in self.linear if b.sense == sense]
        if not blocks:
            return sp.csr_matrix((0, self.n_vars)), np.zeros(0)
        A = sp.vstack([b.padded(self.n_vars) for b in blocks]).tocsr()
        return A, np.concatenate([b.rhs for b in blocks])

    def tags(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for row in self.quad_rows:
            counts[row.tag] = counts.get(row.tag, 0) + 1
        for row in self.soc_rows:
            counts[row.tag] = counts.get(row.tag, 0) + 1
        for block in self.linear:
            counts[block.tag] = counts.get(block.tag, 0) + block.A.shape[0]
        return counts

    def row_violations(self, z: np.ndarray) -> dict[str, float]:
        """Largest violation per row tag at ``z`` (0 when satisfied)."""
        worst: dict[str, float] = {}

        def note(tag: str, value: float) -> None:
            worst[tag] = max(worst.get(tag, 0.0), value)

        for block in self.linear:
            res = block.residual(z)
            note(block.tag, float(res.max()) if res.size else 0.0)
        for row in self.quad_rows:
            note(row.tag, max(row.value(z), 0.0))
        for row in self.soc_rows:
            note(row.tag, max(row.value(z), 0.0))
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if z.size:
            note("bounds", float(max(np.max(lo - z), np.max(z - hi), 0.0)))
        return worst

    def max_violation(self, z: np.ndarray) -> float:
        return max(self.row_violations(z).values(), default=0.0)


def as_quad(expr: Expr) -> Quad:
    if isinstance(expr, Quad):
        return expr
    if isinstance(expr, Lin):
        return Quad(lin=expr)
    return Quad(lin=Lin(const=float(expr)))


def validate(prog: ConicProgram) -> list[str]:
    """Structural problems: non-PSD quadratic parts, non-finite coefficients, dangling variables."""
    problems: list[str] = []
    used = np.zeros(prog.n_vars, dtype=bool)

    def check_lin(lin: Lin, where: str) -> None:
        if not (np.all(np.isfinite(lin.coef)) and math.isfinite(lin.const)):
            problems.append(f"{where}: non-finite coefficient")
        used[lin.idx[lin.coef != 0.0]] = True

    for k, row in enumerate(prog.quad_rows):
        where = f"quadratic row {k} ({row.tag})"
        if not np.all(np.isfinite(row.Q_sub)):
            problems.append(f"{where}: non-finite coefficient")
        elif row.Q_sub.size:
            eig = np.linalg.eigvalsh(0.5 * (row.Q_sub + row.Q_sub.T))
            if eig.min() < -PSD_TOL:
                problems.append(f"{where}: quadratic part is not PSD (eigenvalue {eig.min():.3e})")
        used[row.support[np.any(row.Q_sub != 0.0, axis=0)]] = True
        check_lin(row.a, where)
    for k, row in enumerate(prog.soc_rows):
        for term in row.terms:
            check_lin(term, f"cone row {k} ({row.tag})")
        check_lin(row.bound, f"cone row {k} ({row.tag})")
    for block in prog.linear:
        if not (np.all(np.isfinite(block.A.data)) and np.all(np.isfinite(block.rhs))):
            problems.append(f"linear rows ({block.tag}): non-finite coefficient")
        used[block.A.indices[block.A.data != 0.0]] = True
    if prog.objective.squares or prog.objective.lin.idx.size:
        support, Q_sub, lin = prog.objective.expand()
        if Q_sub.size and np.linalg.eigvalsh(Q_sub).min() < -PSD_TOL:
            problems.append("objective: quadratic part is not PSD")
        used[support] = True
        check_lin(lin, "objective")
    for j in np.flatnonzero(~used):
        problems.append(f"variable {prog.names[j]} appears in no row")
    lo, hi = np.asarray(prog.lower), np.asarray(prog.upper)
    if np.any(lo > hi):
        problems.append("variable bounds are empty")
    return problems


def _factor(Q_sub: np.ndarray, cleanup: float) -> np.ndarray:
    """Rows ``F`` with ``F'F = Q_sub``, dropping eigenvalues below ``cleanup``."""
    if Q_sub.size == 0:
        return np.zeros((0, 0))
    eig, vec = np.linalg.eigh(0.5 * (Q_sub + Q_sub.T))
    keep = eig > cleanup
    return (vec[:, keep] * np.sqrt(eig[keep])).T


class Status(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"
    TIME_LIMIT = "time_limit"


@dataclass
class SolveResult:
    status: Status
    z: Optional[np.ndarray] = None
    objective: float = math.nan
    iterations: int = 0
    wall_time: float = 0.0
    solver_status: str = ""
    max_violation: float = math.nan
    message: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


class CompiledProgram:
    """A program lowered once to cvxpy; ``fixed`` variables are pinned through a parameter."""

    def __init__(
        self,
        prog: ConicProgram,
        settings: Optional[SolverSettings] = None,
        fixed: Optional[np.ndarray] = None,
        objective: Optional[Expr] = None,
        cleanup: Optional[float] = None,
    ) -> None:
        self.prog = prog
        self.settings = settings or SolverSettings()
        cleanup = self.settings.coefficient_cleanup if cleanup is None else cleanup
        n = prog.n_vars
        z = cp.Variable(n)
        cons = []

        lo, hi = np.asarray(prog.lower), np.asarray(prog.upper)
        fin = np.isfinite(lo)
        if fin.any():
            cons.append(z[np.flatnonzero(fin)] >= lo[fin])
        fin = np.isfinite(hi)
        if fin.any():
            cons.append(z[np.flatnonzero(fin)] <= hi[fin])

        for sense in ("le", "eq"):
            A, b = prog.linear_block(sense)
            if A.shape[0]:
                A = A.multiply(abs(A) > cleanup).tocsr()
                cons.append(A @ z <= b if sense == "le" else A @ z == b)

        if prog.quad_rows:
            factors = [_factor(row.Q_sub, cleanup) for row in prog.quad_rows]
            m = len(factors)
            rank = max((f.shape[0] for f in factors), default=0)
            t_lin, t_const = stack_lins([row.a for row in prog.quad_rows], n, cleanup)
            t = -(t_lin @ z) - t_const
            stack = []
            for j in range(rank):
                rows, cols, vals = [], [], []
                for r, (row, F) in enumerate(zip(prog.quad_rows, factors)):
                    if j < F.shape[0]:
                        rows.extend([r] * len(row.support))
                        cols.extend(row.support.tolist())
                        vals.extend(F[j].tolist())
                Fj = sp.csr_matrix((vals, (rows, cols)), shape=(m, n))
                stack.append(2.0 * (Fj @ z))
            if rank:
                # z'F'Fz <= t  <=>  ||(2Fz, 1 - t)|| <= 1 + t
                cons.append(cp.SOC(1.0 + t, cp.vstack(stack + [1.0 - t]), axis=0))
            else:
                cons.append(t >= 0.0)

        for row in prog.soc_rows:
            G, h = stack_lins(row.terms, n, cleanup)
            g, e = stack_lins([row.bound], n, cleanup)
            cons.append(cp.SOC((g @ z)[0] + e[0], G @ z + h))

        self.param: Optional[cp.Parameter] = None
        self.fixed = None if fixed is None else np.asarray(fixed, dtype=int)
        if self.fixed is not None and self.fixed.size:
            self.param = cp.Parameter(self.fixed.size)
            cons.append(z[self.fixed] == self.param)

        target = prog.objective if objective is None else as_quad(objective)
        obj = 0.0
        if target.squares or target.lin.idx.size:
            support, Q_sub, lin = target.expand()
            F = _factor(Q_sub, cleanup)
            if F.shape[0]:
                obj = obj + cp.sum_squares(F @ z[support])
            if lin.idx.size:
                c_vec, _ = stack_lins([lin], n, cleanup)
                obj = obj + (c_vec @ z)[0]
            obj = obj + lin.const
        else:
            obj = target.lin.const
        self.z = z
        self.problem = cp.Problem(cp.Minimize(obj), cons)

    def _solver_kwargs(self) -> dict:
        s = self.settings
        name = s.solver.upper()
        kwargs: dict = {"solver": name, "verbose": s.verbose}
        if name == "CLARABEL":
            kwargs.update(
                tol_feas=s.feasibility_tol,
                tol_gap_abs=s.gap_tol,
                tol_gap_rel=s.gap_tol,
                max_iter=s.max_iter,
                time_limit=float(s.time_limit),
            )
        elif name in ("CVXOPT", "ECOS"):
            kwargs.update(feastol=s.feasibility_tol, abstol=s.gap_tol, reltol=s.gap_tol, max_iters=s.max_iter)
        return kwargs

    def solve(self, values: Optional[np.ndarray] = None) -> SolveResult:
        if self.param is not None:
            if values is None:
                raise ValueError("fixed variables need values")
            self.param.value = np.asarray(values, dtype=float)
        started = time.perf_counter()
        try:
            self.problem.solve(**self._solver_kwargs())
        except cp.error.SolverError as exc:
            wall = time.perf_counter() - started
            logger.warning("conic solver failed: %s", exc)
            return SolveResult(status=Status.NUMERICAL_FAILURE, wall_time=wall, solver_status="solver_error", message=str(exc))
        wall = time.perf_counter() - started
        raw = self.problem.status
        stats = self.problem.solver_stats
        iterations = int(getattr(stats, "num_iters", 0) or 0)

        if raw in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return SolveResult(status=Status.INFEASIBLE, wall_time=wall, iterations=iterations, solver_status=raw)
        if raw == cp.USER_LIMIT:
            return SolveResult(status=Status.TIME_LIMIT, wall_time=wall, iterations=iterations, solver_status=raw)
        if raw not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or self.z.value is None:
            return SolveResult(status=Status.NUMERICAL_FAILURE, wall_time=wall, iterations=iterations, solver_status=str(raw))

        z = np.asarray(self.z.value, dtype=float)
        violation = self.prog.max_violation(z)
        status = Status.OPTIMAL if violation <= self.settings.recheck_tol else Status.NUMERICAL_FAILURE
        if status is Status.NUMERICAL_FAILURE:
            logger.debug("solver reported %s but rows are violated by %.2e", raw, violation)
        return SolveResult(
            status=status,
            z=z if status is Status.OPTIMAL else None,
            objective=float(self.problem.value),
            iterations=iterations,
            wall_time=wall,
            solver_status=raw,
            max_violation=violation,
        )


def solve(prog: ConicProgram, settings: Optional[SolverSettings] = None, cleanup: Optional[float] = None) -> SolveResult:
    result = CompiledProgram(prog, settings, cleanup=cleanup).solve()
    logger.debug("conic solve: status=%s iterations=%d time=%.3fs", result.status.value, result.iterations, result.wall_time)
    return result


def retry_ladder(settings: SolverSettings) -> list[tuple[SolverSettings, float]]:
    """Settings tried after a numerical failure: tighter tolerances first, then installed fallback solvers."""
    tight = settings.model_copy(
        update={
            "feasibility_tol": min(settings.feasibility_tol, settings.retry_tol),
            "gap_tol": min(settings.gap_tol, settings.retry_tol),
            "max_iter": max(settings.max_iter, settings.retry_max_iter),
        }
    )
    ladder = [(tight, settings.retry_cleanup)]
    installed = set(cp.installed_solvers())
    for name in settings.fallback_solvers:
        name = name.upper()
        if name == settings.solver.upper():
            continue
        if name not in installed:
            logger.debug("fallback solver %s is not installed", name)
            continue
        ladder.append((settings.model_copy(update={"solver": name}), settings.coefficient_cleanup))
    return ladder


def solve_with_retries(prog: ConicProgram, settings: Optional[SolverSettings] = None) -> SolveResult:
    """``solve``, then the retry ladder while the result is a numerical failure; wall time is summed."""
    settings = settings or SolverSettings()
    result = solve(prog, settings)
    wall = result.wall_time
    for retry, cleanup in retry_ladder(settings):
        if result.status is not Status.NUMERICAL_FAILURE:
            break
        logger.warning(
            "numerical failure (%s, violation %.2e), retrying with %s tol=%.0e cleanup=%.0e",
            result.solver_status,
            result.max_violation,
            retry.solver,
            retry.feasibility_tol,
            cleanup,
        )
        result = solve(prog, retry, cleanup=cleanup)
        wall += result.wall_time
    result.wall_time = wall
    return result


def to_cbf(prog: ConicProgram, cleanup: float = 0.0) -> str:
    """Dump the program in CBF text form (linear rows, rotated cones for quadratic rows, cones)."""
    n = prog.n_vars
    blocks: list[tuple[str, int]] = []
    acoord: list[tuple[int, int, float]] = []
    bcoord: list[tuple[int, float]] = []
    row = 0

    def emit(lins: Sequence[Lin], cone: str) -> None:
        nonlocal row
        for lin in lins:
            for j, a in zip(lin.idx, lin.coef):
                if abs(a) > cleanup:
                    acoord.append((row, int(j), float(a)))
            if lin.const:
                bcoord.append((row, lin.const))
            row += 1
        blocks.append((cone, len(lins)))

    lo, hi = np.asarray(prog.lower), np.asarray(prog.upper)
    for j in range(n):
        if math.isfinite(lo[j]):
            emit([Lin([j], [1.0], -lo[j])], "L+")
        if math.isfinite(hi[j]):
            emit([Lin([j], [-1.0], hi[j])], "L+")
    for block in prog.linear:
        A = block.padded(n)
        for r in range(A.shape[0]):
            start, end = A.indptr[r], A.indptr[r + 1]
            lin = Lin(A.indices[start:end], A.data[start:end], -block.rhs[r])
            emit([-lin if block.sense == "le" else lin], "L+" if block.sense == "le" else "L=")
    for qrow in prog.quad_rows:
        F = _factor(qrow.Q_sub, cleanup)
        terms = [Lin(qrow.support, F[k]) for k in range(F.shape[0])]
        emit([Lin(const=0.5), -qrow.a] + terms, "QR")
    for srow in prog.soc_rows:
        emit([srow.bound] + srow.terms, "Q")

    obj_lin = prog.objective.lin
    n_total = n
    if prog.objective.squares:
        support, Q_sub, obj_lin = prog.objective.expand()
        F = _factor(Q_sub, cleanup)
        epi = n_total
        n_total += 1
        emit([Lin(const=0.5), Lin([epi], [1.0])] + [Lin(support, F[k]) for k in range(F.shape[0])], "QR")
        obj_lin = obj_lin + Lin([epi], [1.0])
    obj_lin = obj_lin.coalesce()

    out = ["VER", "3", "", "OBJSENSE", "MIN", "", "VAR", f"{n_total} 1", f"F {n_total}", ""]
    out += ["CON", f"{row} {len(blocks)}"] + [f"{cone} {size}" for cone, size in blocks] + [""]
    out += ["OBJACOORD", str(obj_lin.idx.size)] + [f"{j} {a!r}" for j, a in zip(obj_lin.idx, obj_lin.coef)] + [""]
    if obj_lin.const:
        out += ["OBJBCOORD", repr(obj_lin.const), ""]
    out += ["ACOORD", str(len(acoord))] + [f"{i} {j} {a!r}" for i, j, a in acoord] + [""]
    out += ["BCOORD", str(len(bcoord))] + [f"{i} {b!r}" for i, b in bcoord] + [""]
    return "\n".join(out)
