"""Small conic-program IR with a cvxpy/Clarabel backend.

The optimization modules never talk to cvxpy directly; they describe programs
in terms of Hermitian PSD matrix variables, nonnegative/free scalars, linear
functionals, LMI blocks, and absolute-sum (L1) constraints.  This keeps the
problem descriptions readable next to the math and gives one place to handle
solver quirks (status mapping, PSD cleanup, tolerance plumbing).

Conventions
-----------
* A linear functional is an `AffExpr`: sum of terms plus a constant.  A term
  is either `coeff * x` for a scalar variable or `coeff_param * Tr(C @ X)` for
  a matrix variable with constant coefficient matrix C.  Terms may carry the
  name of a declared scalar parameter; the term value is then multiplied by
  the parameter value (this is what makes compiled re-solves cheap).
* Linear constraints are stored as `expr <= 0` / `expr == 0`; the expression
  must be real-valued (Hermitian coefficient matrices).
* An LMI block stores the upper triangle of a Hermitian-by-construction
  matrix of AffExprs; it is lowered to a real symmetric PSD constraint via
  the [[Re, -Im], [Im, Re]] embedding, which is PSD exactly when the complex
  block is.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import cvxpy as cp

OPTIMAL = "optimal"
INACCURATE = "inaccurate"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"

# min-eigenvalue tolerance for returned PSD variables, relative to 1 + ||X||
PSD_TOL = 1e-7


@dataclass(frozen=True)
class Term:
    """One summand of an affine functional: value = param * coeff (*) var."""

    var: str
    coeff: Union[float, complex, np.ndarray]
    param: Optional[str] = None  # scalar parameter multiplier, if any


@dataclass
class AffExpr:
    """Affine functional sum_i term_i + const (+ sum_j scale_j * param_j)."""

    terms: List[Term] = field(default_factory=list)
    const: complex = 0.0
    const_params: List[Tuple[complex, str]] = field(default_factory=list)

    def __add__(self, other: "AffExpr") -> "AffExpr":
        return AffExpr(self.terms + other.terms, self.const + other.const,
                       self.const_params + other.const_params)

    def scaled(self, c: complex) -> "AffExpr":
        return AffExpr([Term(t.var, c * np.asarray(t.coeff) if isinstance(t.coeff, np.ndarray)
                             else c * t.coeff, t.param) for t in self.terms],
                       c * self.const,
                       [(c * s, p) for s, p in self.const_params])


def aff(const: complex = 0.0) -> AffExpr:
    return AffExpr(const=const)


def scalar_term(var: str, coeff: complex = 1.0, param: Optional[str] = None) -> AffExpr:
    return AffExpr(terms=[Term(var, coeff, param)])


def trace_term(var: str, coeff_matrix: np.ndarray, param: Optional[str] = None) -> AffExpr:
    """Tr(C @ X) contribution of matrix variable X."""
    return AffExpr(terms=[Term(var, np.asarray(coeff_matrix, dtype=complex), param)])


@dataclass
class LinearConstraint:
    expr: AffExpr           # expr <= 0 (or == 0)
    equality: bool = False
    label: str = ""


@dataclass
class LmiBlock:
    """dim x dim Hermitian affine block required PSD; upper triangle stored."""

    dim: int
    entries: Dict[Tuple[int, int], AffExpr]  # keys (i, j) with i <= j
    label: str = ""

    def __post_init__(self):
        for (i, j) in self.entries:
            if not (0 <= i <= j < self.dim):
                raise ValueError(f"LMI entry index ({i},{j}) outside upper triangle")


@dataclass
class AbsSum:
    """sum_l |expr_l| <= bound, exprs real-valued affine."""

    exprs: List[AffExpr]
    bound: float
    label: str = ""

    def __post_init__(self):
        if self.bound < 0:
            raise ValueError("absolute-sum bound must be nonnegative")


Constraint = Union[LinearConstraint, LmiBlock, AbsSum]


@dataclass
class ConicProgram:
    """Container for variables, parameters, constraints and a linear objective."""

    psd_vars: Dict[str, int] = field(default_factory=dict)       # name -> dimension
    scalar_vars: Dict[str, Optional[float]] = field(default_factory=dict)  # name -> lower bound
    params: Dict[str, float] = field(default_factory=dict)       # name -> current value
    constraints: List[Constraint] = field(default_factory=list)
    objective: Optional[AffExpr] = None
    sense: str = "min"
    _aux_count: int = 0

    def add_psd_var(self, name: str, dim: int) -> str:
        if name in self.psd_vars or name in self.scalar_vars:
            raise ValueError(f"duplicate variable {name}")
        self.psd_vars[name] = dim
        return name

    def add_scalar_var(self, name: str, lower: Optional[float] = None) -> str:
        if name in self.psd_vars or name in self.scalar_vars:
            raise ValueError(f"duplicate variable {name}")
        self.scalar_vars[name] = lower
        return name

    def add_param(self, name: str, value: float) -> str:
        self.params[name] = float(value)
        return name

    def add_linear(self, expr: AffExpr, equality: bool = False, label: str = "") -> None:
        self._check_expr(expr)
        self.constraints.append(LinearConstraint(expr, equality, label))

    def add_lmi(self, dim: int, entries: Dict[Tuple[int, int], AffExpr], label: str = "") -> None:
        for e in entries.values():
            self._check_expr(e)
        self.constraints.append(LmiBlock(dim, entries, label))

    def add_abs_sum(self, exprs: Sequence[AffExpr], bound: float, label: str = "") -> None:
        for e in exprs:
            self._check_expr(e)
        self.constraints.append(AbsSum(list(exprs), bound, label))

    def set_objective(self, sense: str, expr: AffExpr) -> None:
        if sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")
        self._check_expr(expr)
        self.sense = sense
        self.objective = expr

    def _check_expr(self, expr: AffExpr) -> None:
        for t in expr.terms:
            if t.var in self.psd_vars:
                C = np.asarray(t.coeff)
                d = self.psd_vars[t.var]
                if C.shape != (d, d):
                    raise ValueError(f"coefficient for {t.var} must be {d}x{d}, got {C.shape}")
            elif t.var not in self.scalar_vars:
                raise ValueError(f"constraint references undeclared variable {t.var}")
            if t.param is not None and t.param not in self.params:
                raise ValueError(f"term references undeclared parameter {t.param}")
        for _, p in expr.const_params:
            if p not in self.params:
                raise ValueError(f"constant references undeclared parameter {p}")


@dataclass
class SolveStatus:
    status: str
    objective: Optional[float] = None
    variables: Optional[Dict[str, Union[float, np.ndarray]]] = None
    solver_status: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def lower_absolute_sum(program: ConicProgram, exprs: Sequence[AffExpr],
                       bound: Union[float, AffExpr], label: str = "") -> ConicProgram:
    """Encode sum_l |expr_l| <= bound with auxiliary scalars t_l.

    Adds t_l >= 0, expr_l <= t_l, -expr_l <= t_l and sum t_l <= bound; the
    projection onto the original variables has the same feasible set.

    ``bound`` is either a nonnegative constant or an affine expression in the
    program's variables (e.g. a tolerance proportional to a scale variable);
    in the latter case its nonnegativity is implied by the constraint itself.
    """
    if isinstance(bound, AffExpr):
        bound_expr = bound
    else:
        if bound < 0:
            raise ValueError("bound must be nonnegative")
        bound_expr = aff(float(bound))
    names = []
    for i, e in enumerate(exprs):
        program._aux_count += 1
        nm = f"_abs{program._aux_count}"
        program.add_scalar_var(nm, lower=0.0)
        names.append(nm)
        program.add_linear(e + scalar_term(nm, -1.0), label=f"{label}[{i}]+")
        program.add_linear(e.scaled(-1.0) + scalar_term(nm, -1.0), label=f"{label}[{i}]-")
    total = AffExpr(terms=[Term(nm, 1.0) for nm in names]) + bound_expr.scaled(-1.0)
    program.add_linear(total, label=f"{label}:sum")
    return program


def hermitian_real_embedding(M: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Real symmetric embedding [[Re M, -Im M], [Im M, Re M]] of a Hermitian M.

    The embedding is PSD iff M is; each eigenvalue of M appears twice.
    """
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("M must be square")
    if np.max(np.abs(M - M.conj().T)) > tol * max(1.0, np.max(np.abs(M))):
        raise ValueError("M is not Hermitian within tolerance")
    Re, Im = M.real, M.imag
    return np.block([[Re, -Im], [Im, Re]])


# ---------------------------------------------------------------------------
# lowering to cvxpy


def _lower(program: ConicProgram):
    cvars: Dict[str, cp.Variable] = {}
    for name, dim in program.psd_vars.items():
        cvars[name] = cp.Variable((dim, dim), hermitian=True, name=name)
    for name, lower in program.scalar_vars.items():
        cvars[name] = cp.Variable(name=name, nonneg=(lower == 0.0))
    cparams: Dict[str, cp.Parameter] = {
        name: cp.Parameter(name=name, value=val) for name, val in program.params.items()
    }

    def expr_cvx(e: AffExpr, real_part: bool):
        out = cp.Constant(e.const.real if real_part else e.const)
        for s, p in e.const_params:
            out = out + s * cparams[p]
        for t in e.terms:
            if t.var in program.psd_vars:
                base = cp.trace(np.asarray(t.coeff, dtype=complex) @ cvars[t.var])
            else:
                base = t.coeff * cvars[t.var]
            if t.param is not None:
                base = cparams[t.param] * base
            out = out + base
        if real_part and out.is_complex():
            out = cp.real(out)
        return out

    constraints = []
    for name, lower in program.scalar_vars.items():
        if lower is not None and lower != 0.0:
            constraints.append(cvars[name] >= lower)
    for name in program.psd_vars:
        constraints.append(cvars[name] >> 0)

    for con in program.constraints:
        if isinstance(con, LinearConstraint):
            e = expr_cvx(con.expr, real_part=True)
            constraints.append(e == 0 if con.equality else e <= 0)
        elif isinstance(con, AbsSum):
            # direct L1 lowering; lower_absolute_sum offers the explicit
            # auxiliary-variable reduction when the caller wants it
            total = sum(cp.abs(expr_cvx(e, real_part=True)) for e in con.exprs)
            constraints.append(total <= con.bound)
        elif isinstance(con, LmiBlock):
            n = con.dim
            # complex Hermitian affine block -> real symmetric embedding
            re = [[None] * n for _ in range(n)]
            im = [[None] * n for _ in range(n)]
            zero = cp.Constant(0.0)
            for i in range(n):
                for j in range(i, n):
                    e = con.entries.get((i, j))
                    if e is None:
                        re[i][j] = re[j][i] = zero
                        im[i][j] = zero
                        im[j][i] = zero
                        continue
                    ec = expr_cvx(e, real_part=False)
                    if ec.is_complex():
                        rij = cp.real(ec)
                        iij = cp.imag(ec)
                    else:
                        rij = ec
                        iij = zero
                    re[i][j] = rij
                    re[j][i] = rij
                    im[i][j] = iij
                    im[j][i] = -iij if i != j else iij  # diagonal must be real
            rows = []
            for i in range(n):
                rows.append([cp.reshape(re[i][j], (1, 1), order="F") for j in range(n)]
                            + [cp.reshape(-im[i][j], (1, 1), order="F") for j in range(n)])
            for i in range(n):
                rows.append([cp.reshape(im[i][j], (1, 1), order="F") for j in range(n)]
                            + [cp.reshape(re[i][j], (1, 1), order="F") for j in range(n)])
            S = cp.bmat(rows)
            constraints.append((S + S.T) / 2 >> 0)
        else:  # pragma: no cover
            raise TypeError(f"unknown constraint {con!r}")

    if program.objective is None:
        obj = cp.Minimize(0)
    else:
        e = expr_cvx(program.objective, real_part=True)
        obj = cp.Minimize(e) if program.sense == "min" else cp.Maximize(e)
    return cp.Problem(obj, constraints), cvars, cparams


def _clean_psd(X: np.ndarray) -> Optional[np.ndarray]:
    """Symmetrize and clip small negative eigenvalues; None if truly indefinite."""
    X = np.asarray(X)
    X = (X + X.conj().T) / 2
    w, V = np.linalg.eigh(X)
    floor = -PSD_TOL * (1.0 + np.linalg.norm(X))
    if w.min() < floor:
        return None
    if w.min() < 0:
        w = np.maximum(w, 0.0)
        X = (V * w) @ V.conj().T
        X = (X + X.conj().T) / 2
    return X


_STATUS_MAP = {
    cp.OPTIMAL: OPTIMAL,
    cp.OPTIMAL_INACCURATE: INACCURATE,
    cp.INFEASIBLE: INFEASIBLE,
    cp.INFEASIBLE_INACCURATE: INFEASIBLE,
}


def _default_solver_opts(interior_tol: float) -> dict:
    return {
        "solver": cp.CLARABEL,
        "tol_gap_abs": interior_tol,
        "tol_gap_rel": interior_tol,
        "tol_feas": interior_tol,
        "max_iter": 200,
        # the default 1e-8 static regularization lets badly conditioned
        # KKT systems stall at "almost solved"; one notch more keeps the
        # same solutions (differences below the interior tolerance scale)
        # while converging cleanly
        "static_regularization_constant": 1e-7,
    }


def _extract(program: ConicProgram, problem: cp.Problem, cvars) -> SolveStatus:
    raw = problem.status
    mapped = _STATUS_MAP.get(raw, NUMERICAL_FAILURE)
    if mapped not in (OPTIMAL, INACCURATE):
        return SolveStatus(status=mapped, solver_status=str(raw))
    values: Dict[str, Union[np.ndarray, float]] = {}
    for name in program.psd_vars:
        X = cvars[name].value
        if X is None:
            return SolveStatus(status=NUMERICAL_FAILURE, solver_status=f"{raw}:no value")
        cleaned = _clean_psd(X)
        if cleaned is None:
            if mapped == OPTIMAL:
                return SolveStatus(status=NUMERICAL_FAILURE,
                                   solver_status=f"{raw}:indefinite {name}")
            # low-accuracy solves may come back mildly indefinite; clip so the
            # caller can still read scalar values, but keep the status honest
            X = (X + X.conj().T) / 2
            w, V = np.linalg.eigh(X)
            cleaned = (V * np.maximum(w, 0.0)) @ V.conj().T
            cleaned = (cleaned + cleaned.conj().T) / 2
        values[name] = cleaned
    for name in program.scalar_vars:
        v = cvars[name].value
        if v is None:
            return SolveStatus(status=NUMERICAL_FAILURE, solver_status=f"{raw}:no value")
        values[name] = float(v)
    obj = problem.value
    return SolveStatus(status=mapped, objective=None if obj is None else float(obj),
                       variables=values, solver_status=str(raw))


def solve(program: ConicProgram, interior_tol: float = 1e-8, **solver_opts) -> SolveStatus:
    """One-shot solve; numerical breakdowns come back as NUMERICAL_FAILURE."""
    try:
        problem, cvars, _ = _lower(program)
        opts = _default_solver_opts(interior_tol)
        opts.update(solver_opts)
        with warnings.catch_warnings():
            # accuracy is judged from the mapped status, not cvxpy's warning
            warnings.filterwarnings("ignore", message="Solution may be inaccurate")
            problem.solve(**opts)
    except cp.error.SolverError as ex:
        return SolveStatus(status=NUMERICAL_FAILURE, solver_status=f"SolverError: {ex}")
    except cp.error.DCPError:
        raise
    return _extract(program, problem, cvars)


class ParametricSolver:
    """Compile a ConicProgram once, then re-solve cheaply for new parameter values.

    The program must declare its varying coefficients as parameters; the
    compiled cvxpy problem is kept alive so each solve only re-canonicalizes
    parameter data.
    """

    def __init__(self, program: ConicProgram, interior_tol: float = 1e-8, **solver_opts):
        self.program = program
        self.problem, self._cvars, self._cparams = _lower(program)
        self._opts = _default_solver_opts(interior_tol)
        self._opts.update(solver_opts)
        self.solve_count = 0

    def solve(self, param_values: Optional[Dict[str, float]] = None) -> SolveStatus:
        if param_values:
            for name, val in param_values.items():
                self._cparams[name].value = float(val)
        self.solve_count += 1
        try:
            with warnings.catch_warnings():
                # accuracy is judged from the mapped status, not cvxpy's warning
                warnings.filterwarnings("ignore", message="Solution may be inaccurate")
                self.problem.solve(**self._opts)
        except cp.error.SolverError as ex:
            return SolveStatus(status=NUMERICAL_FAILURE, solver_status=f"SolverError: {ex}")
        return _extract(self.program, self.problem, self._cvars)


def evaluate_expr(expr: AffExpr, values: Dict[str, Union[float, np.ndarray]],
                  params: Optional[Dict[str, float]] = None) -> complex:
    """Numeric value of an AffExpr at a variable assignment (for residual checks)."""
    params = params or {}
    out = complex(expr.const)
    for s, p in expr.const_params:
        out += s * params[p]
    for t in expr.terms:
        v = values[t.var]
        if isinstance(t.coeff, np.ndarray):
            contrib = np.trace(t.coeff @ v)
        else:
            contrib = t.coeff * v
        if t.param is not None:
            contrib *= params[t.param]
        out += contrib
    return out


def constraint_residuals(program: ConicProgram,
                         values: Dict[str, Union[float, np.ndarray]]) -> Dict[str, float]:
    """Worst violation per constraint label (positive = violated)."""
    out: Dict[str, float] = {}
    params = program.params
    for idx, con in enumerate(program.constraints):
        label = getattr(con, "label", "") or f"c{idx}"
        if isinstance(con, LinearConstraint):
            v = evaluate_expr(con.expr, values, params).real
            out[label] = abs(v) if con.equality else v
        elif isinstance(con, AbsSum):
            tot = sum(abs(evaluate_expr(e, values, params).real) for e in con.exprs)
            out[label] = tot - con.bound
        elif isinstance(con, LmiBlock):
            M = np.zeros((con.dim, con.dim), dtype=complex)
            for (i, j), e in con.entries.items():
                v = evaluate_expr(e, values, params)
                M[i, j] = v
                if i != j:
                    M[j, i] = np.conj(v)
            out[label] = -float(np.linalg.eigvalsh(M).min())
    return out


def dump_program(program: ConicProgram) -> str:
    """Human-readable one-constraint-per-line dump (for diffing/debugging)."""
    buf = io.StringIO()
    for name, dim in program.psd_vars.items():
        buf.write(f"psd {name} {dim}x{dim}\n")
    for name, lower in program.scalar_vars.items():
        buf.write(f"scalar {name}" + (f" >= {lower}\n" if lower is not None else "\n"))
    for name, val in program.params.items():
        buf.write(f"param {name} = {val}\n")

    def fmt(e: AffExpr) -> str:
        parts = []
        for t in e.terms:
            c = t.coeff
            cs = f"tr(C@{t.var})" if isinstance(c, np.ndarray) else f"{c:+.6g}*{t.var}"
            if t.param:
                cs = f"{t.param}*" + cs
            parts.append(cs)
        if e.const != 0:
            parts.append(f"{e.const:+.6g}")
        for s, p in e.const_params:
            parts.append(f"{s:+.6g}*{p}")
        return " ".join(parts) if parts else "0"

    if program.objective is not None:
        buf.write(f"{program.sense} {fmt(program.objective)}\n")
    for idx, con in enumerate(program.constraints):
        label = getattr(con, "label", "") or f"c{idx}"
        if isinstance(con, LinearConstraint):
            op = "==" if con.equality else "<="
            buf.write(f"{label}: {fmt(con.expr)} {op} 0\n")
        elif isinstance(con, AbsSum):
            buf.write(f"{label}: sum_abs[{len(con.exprs)}] <= {con.bound}\n")
        elif isinstance(con, LmiBlock):
            buf.write(f"{label}: lmi {con.dim}x{con.dim} psd\n")
    return buf.getvalue()
