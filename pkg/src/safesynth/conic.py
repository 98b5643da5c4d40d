"""Standard-form conic program builder and solver interface.

Supports linear equalities plus nonnegative, second-order and positive-
semidefinite cone constraints: the lowering target for every synthesis
program in this package.  Modeling and canonicalization are delegated to
cvxpy; the default backend is the embedded Clarabel interior-point solver,
which handles all three cone types natively and is deterministic for
identical inputs.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Optional

import cvxpy as cp
import numpy as np
import scipy.sparse as sp

__all__ = ["Cone", "SolveStatus", "Residuals", "ConicSolution", "ConicProgram"]


class Cone(enum.Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SECOND_ORDER = "second_order"
    PSD = "psd"


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class Residuals:
    primal: Optional[float]
    dual: Optional[float]
    gap: Optional[float]


@dataclass(frozen=True)
class ConicSolution:
    status: SolveStatus
    objective_value: Optional[float]
    values: dict[str, np.ndarray]
    residuals: Residuals
    surrogate_norm_used: bool = False
    solve_time: Optional[float] = None


@dataclass
class _TaggedConstraint:
    constraint: cp.Constraint
    cone: Cone
    label: str


class ConicProgram:
    """Conic program over named, optionally sparsity-masked matrix variables.

    Entries fixed to zero by a mask are excluded from the solver's variable
    vector (a sparse scatter maps the packed free entries into the matrix
    expression).  The objective is an affine scalar, typically a single
    epigraph variable bounded through ``add_frobenius_epigraph``.
    """

    def __init__(self, name: str = "conic"):
        self.name = name
        self._variables: dict[str, cp.Expression] = {}
        self._constraints: list[_TaggedConstraint] = []
        self._objective: Optional[cp.Expression] = None
        self._surrogate_used = False

    # ---- variables ----------------------------------------------------

    def add_variable(self, name: str, shape: tuple[int, ...],
                     mask: Optional[np.ndarray] = None,
                     nonneg: bool = False) -> cp.Expression:
        if name in self._variables:
            raise ValueError(f"variable '{name}' already declared")
        if mask is None:
            expr = cp.Variable(shape, name=name, nonneg=nonneg)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != tuple(shape):
                raise ValueError(f"mask shape {mask.shape} != variable shape {shape}")
            k = int(mask.sum())
            free = cp.Variable(k, name=name, nonneg=nonneg)
            scatter = sp.csr_matrix(
                (np.ones(k), (np.flatnonzero(mask.ravel()), np.arange(k))),
                shape=(int(np.prod(shape)), k))
            expr = cp.reshape(scatter @ free, shape, order="C")
        self._variables[name] = expr
        return expr

    def add_scalar(self, name: str, nonneg: bool = False) -> cp.Expression:
        return self.add_variable(name, (), nonneg=nonneg)

    def value(self, name: str) -> Optional[np.ndarray]:
        expr = self._variables[name]
        return None if expr.value is None else np.asarray(expr.value)

    # ---- objective and constraints ------------------------------------

    def set_objective(self, expr) -> None:
        self._objective = expr

    def add_equality(self, lhs, rhs=0) -> None:
        self._constraints.append(_TaggedConstraint(lhs == rhs, Cone.ZERO, "equality"))

    def add_nonneg(self, expr) -> None:
        """Elementwise expr >= 0."""
        self._constraints.append(_TaggedConstraint(expr >= 0, Cone.NONNEG, "nonneg"))

    def add_frobenius_epigraph(self, expr, t) -> None:
        """Second-order cone constraint ||vec(expr)||_2 <= t."""
        con = cp.norm(cp.vec(expr, order="C"), 2) <= t
        self._constraints.append(_TaggedConstraint(con, Cone.SECOND_ORDER, "frobenius"))

    def add_row_one_norm(self, row_expr, bound_expr) -> None:
        """||row||_1 <= bound (lowered through nonnegative splits)."""
        con = cp.norm(cp.vec(row_expr, order="C"), 1) <= bound_expr
        self._constraints.append(_TaggedConstraint(con, Cone.NONNEG, "row_one_norm"))

    def add_matrix_inf_norm(self, M_expr, tau) -> None:
        """Induced infinity-norm bound: every row 1-norm <= tau."""
        con = cp.sum(cp.abs(M_expr), axis=1) <= tau
        self._constraints.append(_TaggedConstraint(con, Cone.NONNEG, "matrix_inf_norm"))

    def add_spectral_norm(self, M_expr, gamma, mode: str = "psd") -> None:
        """Spectral norm bound ||M||_2 <= gamma.

        ``"psd"`` uses the exact block characterization
        [[gamma I, M], [M^T, gamma I]] >= 0; ``"frobenius_surrogate"`` uses
        the conservative ||M||_F <= gamma (sufficient since the spectral norm
        never exceeds the Frobenius norm) for backends without PSD support.
        """
        r, c = M_expr.shape
        if mode == "psd":
            block = cp.bmat([[gamma * np.eye(r), M_expr],
                             [M_expr.T, gamma * np.eye(c)]])
            self._constraints.append(
                _TaggedConstraint(block >> 0, Cone.PSD, "spectral_norm"))
        elif mode == "frobenius_surrogate":
            self._surrogate_used = True
            con = cp.norm(cp.vec(M_expr, order="C"), 2) <= gamma
            self._constraints.append(
                _TaggedConstraint(con, Cone.SECOND_ORDER, "spectral_norm_surrogate"))
        else:
            raise ValueError(f"unknown spectral norm mode '{mode}'")

    # ---- solving -------------------------------------------------------

    _STATUS_MAP = {
        cp.OPTIMAL: SolveStatus.OPTIMAL,
        cp.INFEASIBLE: SolveStatus.INFEASIBLE,
        cp.UNBOUNDED: SolveStatus.UNBOUNDED,
    }

    def _primal_residual(self) -> Optional[float]:
        worst = 0.0
        for tagged in self._constraints:
            try:
                v = tagged.constraint.violation()
            except (ValueError, TypeError):
                return None
            if v is None:
                return None
            worst = max(worst, float(np.max(v)) if np.size(v) else 0.0)
        return worst

    def solve(self, solver: str = "CLARABEL", tol: float = 1e-8,
              verbose: bool = False) -> ConicSolution:
        objective = self._objective if self._objective is not None else 0
        problem = cp.Problem(cp.Minimize(objective),
                             [t.constraint for t in self._constraints])
        kwargs = {}
        if solver.upper() == "CLARABEL":
            kwargs = {"tol_gap_abs": tol, "tol_gap_rel": tol, "tol_feas": tol}
        try:
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message=".*inaccurate.*")
                problem.solve(solver=solver, verbose=verbose, **kwargs)
        except (cp.SolverError, ValueError):
            return ConicSolution(SolveStatus.NUMERICAL_FAILURE, None, {},
                                 Residuals(None, None, None),
                                 self._surrogate_used, None)
        status = self._STATUS_MAP.get(problem.status, SolveStatus.NUMERICAL_FAILURE)
        values: dict[str, np.ndarray] = {}
        primal = None
        if status is SolveStatus.OPTIMAL:
            values = {name: np.asarray(expr.value)
                      for name, expr in self._variables.items()
                      if expr.value is not None}
            primal = self._primal_residual()
        stats = problem.solver_stats
        gap = None
        solve_time = getattr(stats, "solve_time", None) if stats else None
        obj = float(problem.value) if problem.value is not None and np.isfinite(problem.value) else None
        return ConicSolution(status, obj if status is SolveStatus.OPTIMAL else None,
                             values, Residuals(primal, None, gap),
                             self._surrogate_used, solve_time)

    # ---- debugging -----------------------------------------------------

    def dump(self) -> str:
        """Plain-text standard-form listing for debugging and cross-checks."""
        lines = [f"conic program '{self.name}'", "variables:"]
        for name, expr in self._variables.items():
            lines.append(f"  {name}: shape {tuple(expr.shape)}")
        lines.append(f"objective: minimize {self._objective}")
        lines.append("constraints:")
        for tagged in self._constraints:
            lines.append(f"  [{tagged.cone.value}] {tagged.label}: {tagged.constraint}")
        return "\n".join(lines)
