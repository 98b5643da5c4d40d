"""Controller synthesis programs over the closed-loop response maps.

``solve_nominal`` computes the optimal safe linear policy for a known (or
exactly estimated) plant.  ``solve_robust_inner`` / ``search_hyperparams``
solve the robustified program for noise-corrupted estimates: the quadratic
cost is replaced by a certified upper bound governed by a spectral-norm cap
gamma, and the safety constraints by tightened surrogates governed by an
infinity-norm cap tau.  The certified cost J_robust(gamma, tau) is unimodal
in gamma once the cost inflation is frozen at a fixed alpha, so gamma can be
minimized by golden-section search, while tau is swept over a grid.

``solve_tightened_oracle`` and ``suboptimality_gap_S`` implement the
diagnostic program used to quantify how much the constraint tightening alone
costs on the true plant, and ``theoretical_bound`` assembles the end-to-end
relative suboptimality certificate.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .behavior import EstimateBundle
from .conic import ConicProgram, SolveStatus
from .iop import (ClosedLoopMaps, CostWeights, ToeplitzOperator,
                  achievability_residual, block_causal_mask,
                  controller_from_responses, h_value, mat_inf_norm,
                  mat_two_norm, tightened_lhs_f, toeplitz_expand)
from .plant import NoiseSpec, SafetyPolytope

__all__ = [
    "HyperParams",
    "SynthesisResult",
    "BoundTerms",
    "OracleResult",
    "SCurvePoint",
    "GridRandom",
    "GoldenGamma",
    "golden_section",
    "bound_from_terms",
    "solve_nominal",
    "solve_robust_inner",
    "robust_cost",
    "search_hyperparams",
    "solve_tightened_oracle",
    "suboptimality_gap_S",
    "theoretical_bound",
    "safe_exploration_policy",
]

_GAMMA_MARGIN = 1e-6  # keep eps2*gamma and eps_inf*tau strictly below 1


@dataclass(frozen=True)
class HyperParams:
    """Hyper-parameters of the robust program.

    ``gamma`` caps the spectral norm of Phi_uy, ``tau`` its infinity-norm,
    and ``alpha`` freezes the cost-inflation level (gamma <= alpha).  ``None``
    means the corresponding cap is not applied (allowed only when the matching
    error level is zero or no safety rows are active).
    """

    gamma: Optional[float] = None
    tau: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        for name in ("gamma", "tau", "alpha"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.gamma is not None and self.alpha is not None \
                and self.gamma > self.alpha * (1 + 1e-12):
            raise ValueError("gamma must not exceed alpha")

    def validate_against(self, eps2: float, eps_inf: float) -> None:
        if eps2 > 0:
            if self.gamma is None:
                raise ValueError("gamma required when eps2 > 0")
            if eps2 * self.gamma >= 1:
                raise ValueError(f"eps2 * gamma = {eps2 * self.gamma:.4f} must be < 1")
        if eps_inf > 0 and self.tau is not None and eps_inf * self.tau >= 1:
            raise ValueError(f"eps_inf * tau = {eps_inf * self.tau:.4f} must be < 1")


@dataclass(frozen=True)
class BoundTerms:
    """Terms of the relative suboptimality certificate."""

    eta: float
    zeta: float
    M_c: float
    V_c: float
    S_eps: float
    bound_value: float
    certified: bool
    violations: tuple[str, ...] = ()


@dataclass(frozen=True)
class SynthesisResult:
    status: SolveStatus
    controller: Optional[np.ndarray]
    maps_hat: Optional[ClosedLoopMaps]
    hyper: Optional[HyperParams]
    j_inner: float
    j_robust: float
    diagnostics: Optional[BoundTerms] = None
    verification: Optional[dict] = None
    evaluations: int = 1

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    def to_json(self) -> str:
        payload = {
            "status": self.status.value,
            "j_inner": self.j_inner,
            "j_robust": self.j_robust,
            "evaluations": self.evaluations,
        }
        if self.controller is not None:
            payload["controller"] = {
                "rows": int(self.controller.shape[0]),
                "cols": int(self.controller.shape[1]),
                "block_dims": [int(self.maps_hat.m), int(self.maps_hat.p)]
                if self.maps_hat is not None else None,
                "data_row_major": [float(x) for x in self.controller.ravel()],
            }
        if self.hyper is not None:
            payload["hyper"] = {"gamma": self.hyper.gamma, "tau": self.hyper.tau,
                                "alpha": self.hyper.alpha}
        if self.diagnostics is not None:
            payload["diagnostics"] = {
                "eta": self.diagnostics.eta, "zeta": self.diagnostics.zeta,
                "M_c": self.diagnostics.M_c, "V_c": self.diagnostics.V_c,
                "S_eps": self.diagnostics.S_eps,
                "bound_value": self.diagnostics.bound_value,
                "certified": self.diagnostics.certified,
                "violations": list(self.diagnostics.violations),
            }
        return json.dumps(payload, indent=2, allow_nan=True)

    @staticmethod
    def controller_from_json(text: str) -> Optional[np.ndarray]:
        payload = json.loads(text)
        if "controller" not in payload:
            return None
        c = payload["controller"]
        return np.array(c["data_row_major"], dtype=float).reshape(c["rows"], c["cols"])


@dataclass(frozen=True)
class GridRandom:
    """Evaluate the robust cost at uniform-random (gamma, tau) pairs."""

    n_points: int = 100
    seed: int = 0


@dataclass(frozen=True)
class GoldenGamma:
    """Golden-section search over gamma for every tau in a grid."""

    tau_grid: Optional[tuple[float, ...]] = None
    iters: int = 40


def golden_section(f: Callable[[float], float], lo: float, hi: float,
                   iters: int = 40, rel_tol: float = 1e-8
                   ) -> tuple[float, float]:
    """Minimize a unimodal scalar function on [lo, hi].

    Returns the best evaluated point (endpoints included); infinities are
    permitted and compare as larger than any finite value.
    """
    if hi < lo:
        raise ValueError("empty interval")
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    evals: dict[float, float] = {}

    def memo(x: float) -> float:
        if x not in evals:
            evals[x] = f(x)
        return evals[x]

    memo(lo)
    if hi > lo:
        memo(hi)
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = memo(x1), memo(x2)
    span0 = max(hi - lo, 1e-300)
    for _ in range(iters):
        if (b - a) <= rel_tol * span0:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = memo(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = memo(x2)
    best_x = min(evals, key=lambda x: (evals[x], x))
    return best_x, evals[best_x]


# ---------------------------------------------------------------------------
# program assembly
# ---------------------------------------------------------------------------

def _declare_maps(prog: ConicProgram, p: int, m: int, N: int):
    v_yy = prog.add_variable("v_yy", (p * N, p * N), mask=block_causal_mask(N, p, p, strict=True))
    v_yu = prog.add_variable("v_yu", (p * N, m * N), mask=block_causal_mask(N, p, m, strict=True))
    v_uy = prog.add_variable("v_uy", (m * N, p * N), mask=block_causal_mask(N, m, p, strict=False))
    v_uu = prog.add_variable("v_uu", (m * N, m * N), mask=block_causal_mask(N, m, m, strict=True))
    phi_yy = np.eye(p * N) + v_yy
    phi_uu = np.eye(m * N) + v_uu
    return phi_yy, v_yu, v_uy, phi_uu


def _add_achievability(prog: ConicProgram, phis, G_dense: np.ndarray,
                       p: int, m: int, N: int) -> None:
    phi_yy, phi_yu, phi_uy, phi_uu = phis
    prog.add_equality(phi_yy - G_dense @ phi_uy, np.eye(p * N))
    prog.add_equality(phi_yu - G_dense @ phi_uu, np.zeros((p * N, m * N)))
    prog.add_equality(-phi_yy @ G_dense + phi_yu, np.zeros((p * N, m * N)))
    prog.add_equality(-phi_uy @ G_dense + phi_uu, np.eye(m * N))


def _add_objective(prog: ConicProgram, phis, y0: np.ndarray, weights: CostWeights,
                   c_yy: float = 1.0, c_uy: float = 1.0):
    import cvxpy as cp
    phi_yy, phi_yu, phi_uy, phi_uu = phis
    pN = phi_yy.shape[0]
    mN = phi_uu.shape[0]
    Qh, Rh = weights.q_sqrt(), weights.r_sqrt()
    Svh, Swh = weights.sigma_v_sqrt_big(), weights.sigma_w_sqrt_big()
    top = [c_yy * (Qh @ phi_yy @ Svh), Qh @ phi_yu @ Swh,
           cp.reshape(Qh @ (phi_yy @ y0), (pN, 1), order="C")]
    bot = [c_uy * (Rh @ phi_uy @ Svh), Rh @ phi_uu @ Swh,
           cp.reshape(Rh @ (phi_uy @ y0), (mN, 1), order="C")]
    t = prog.add_scalar("j_epigraph", nonneg=True)
    prog.add_frobenius_epigraph(cp.bmat([top, bot]), t)
    prog.set_objective(t)
    return t


def _row_selectors(polytope: SafetyPolytope, N: int):
    """(time, row index, F-row, bound) tuples for the active y and u rows."""
    y_rows, u_rows = [], []
    for t in polytope.active_y_steps(N):
        for i in range(polytope.F_y.shape[0]):
            y_rows.append((t, i, polytope.F_y[i], float(polytope.b_y[i])))
    for t in polytope.active_u_steps(N):
        for i in range(polytope.F_u.shape[0]):
            u_rows.append((t, i, polytope.F_u[i], float(polytope.b_u[i])))
    return y_rows, u_rows


def _stacked_row(f_row: np.ndarray, t: int, dim: int, N: int) -> np.ndarray:
    row = np.zeros(dim * N)
    row[t * dim:(t + 1) * dim] = f_row
    return row


def _add_dual_norm_rows(prog: ConicProgram, phis, polytope: SafetyPolytope,
                        noise: NoiseSpec, y0: np.ndarray, p: int, m: int, N: int,
                        coef_extra_yy: float = 0.0, denom: float = 1.0) -> None:
    """Safety rows: (v_inf/denom + coef_extra_yy) * ||F_j Phi_.y||_1
    + w_inf * ||F_j Phi_.u||_1 + F_j Phi_.y y0 <= b_j.

    With denom = 1 and coef_extra_yy = 0 these are the exact worst-case
    constraints over the bounded noise set.
    """
    import cvxpy as cp
    phi_yy, phi_yu, phi_uy, phi_uu = phis
    y_rows, u_rows = _row_selectors(polytope, N)
    c_yy = noise.v_inf / denom + coef_extra_yy
    for t, _, f_row, bound in y_rows:
        fy = _stacked_row(f_row, t, p, N)
        row_yy = fy @ phi_yy
        row_yu = fy @ phi_yu
        stacked = cp.hstack([c_yy * row_yy, noise.w_inf * row_yu])
        prog.add_row_one_norm(stacked, bound - row_yy @ y0)
    for t, _, f_row, bound in u_rows:
        fu = _stacked_row(f_row, t, m, N)
        row_uy = fu @ phi_uy
        row_uu = fu @ phi_uu
        stacked = cp.hstack([c_yy * row_uy, noise.w_inf * row_uu])
        prog.add_row_one_norm(stacked, bound - row_uy @ y0)


def _extract_maps(prog: ConicProgram, p: int, m: int, N: int) -> ClosedLoopMaps:
    phi_yy = np.eye(p * N) + prog.value("v_yy")
    phi_yu = prog.value("v_yu")
    phi_uy = prog.value("v_uy")
    phi_uu = np.eye(m * N) + prog.value("v_uu")
    return ClosedLoopMaps(phi_yy, phi_yu, phi_uy, phi_uu, p=p, m=m)


def _weights_or_identity(weights: Optional[CostWeights], p: int, m: int, N: int
                         ) -> CostWeights:
    return CostWeights.identity(p, m, N) if weights is None else weights


def solve_nominal(g_column: np.ndarray, y0: np.ndarray,
                  polytope: Optional[SafetyPolytope], noise: NoiseSpec,
                  weights: Optional[CostWeights] = None, p: int = 1, m: int = 1,
                  solver: str = "CLARABEL") -> SynthesisResult:
    """Optimal safe linear policy for the plant described by ``g_column``.

    Minimizes the closed-loop quadratic cost subject to achievability of the
    response maps and worst-case safety over the bounded noise set; the
    controller is recovered as K = Phi_uy Phi_yy^{-1}.
    """
    g_column = np.asarray(g_column, dtype=float).reshape(-1, m)
    y0 = np.asarray(y0, dtype=float).ravel()
    N = g_column.shape[0] // p
    weights = _weights_or_identity(weights, p, m, N)
    G = ToeplitzOperator(g_column, p=p, m=m)
    prog = ConicProgram("nominal")
    phis = _declare_maps(prog, p, m, N)
    _add_achievability(prog, phis, G.dense(), p, m, N)
    _add_objective(prog, phis, y0, weights)
    if polytope is not None:
        _add_dual_norm_rows(prog, phis, polytope, noise, y0, p, m, N)
    sol = prog.solve(solver=solver)
    if sol.status is not SolveStatus.OPTIMAL:
        return SynthesisResult(sol.status, None, None, None, math.inf, math.inf)
    maps = _extract_maps(prog, p, m, N)
    K = controller_from_responses(maps)
    r1, r2 = achievability_residual(maps, G)
    verification = {"achievability": max(r1, r2),
                    "primal_residual": sol.residuals.primal}
    j = float(sol.objective_value)
    return SynthesisResult(SolveStatus.OPTIMAL, K, maps,
                           HyperParams(), j_inner=j, j_robust=j,
                           verification=verification)


def solve_robust_inner(bundle: EstimateBundle, polytope: Optional[SafetyPolytope],
                       noise: NoiseSpec, hyper: HyperParams,
                       weights: Optional[CostWeights] = None,
                       solver: str = "CLARABEL",
                       spectral_mode: str = "psd") -> SynthesisResult:
    """Inner robust program at fixed (gamma, tau, alpha).

    Minimizes the inflated cost certificate over maps achievable on the
    estimated plant, subject to the norm caps and the tightened safety rows.
    ``j_robust`` already includes the outer 1/(1 - eps2*gamma) factor.
    """
    eps2, eps_inf = bundle.require_errors()
    hyper.validate_against(eps2, eps_inf)
    p, m, N = bundle.p, bundle.m, bundle.N
    weights = _weights_or_identity(weights, p, m, N)
    G_hat = ToeplitzOperator(bundle.g_column, p=p, m=m)
    y0_hat = bundle.y0_hat
    alpha_h = hyper.alpha if hyper.alpha is not None else (hyper.gamma or 0.0)
    hG = h_value(eps2, alpha_h, mat_two_norm(G_hat.dense()))
    hy = h_value(eps2, alpha_h, float(np.linalg.norm(y0_hat)))
    c_yy = math.sqrt(1.0 + hG + hy)
    c_uy = math.sqrt(1.0 + hy)

    prog = ConicProgram("robust_inner")
    phis = _declare_maps(prog, p, m, N)
    _add_achievability(prog, phis, G_hat.dense(), p, m, N)
    _add_objective(prog, phis, y0_hat, weights, c_yy=c_yy, c_uy=c_uy)
    if hyper.gamma is not None:
        prog.add_spectral_norm(phis[2], hyper.gamma, mode=spectral_mode)
    has_rows = polytope is not None and any(_row_selectors(polytope, N))
    if has_rows:
        y_rows, u_rows = _row_selectors(polytope, N)
        if y_rows or u_rows:
            if eps_inf > 0:
                if hyper.tau is None:
                    raise ValueError("tau required when eps_inf > 0 with safety rows")
                tau = hyper.tau
                prog.add_matrix_inf_norm(phis[2], tau)
                denom = 1.0 - eps_inf * tau
                g_inf = mat_inf_norm(G_hat.dense())
                y0_inf = float(np.max(np.abs(y0_hat))) if y0_hat.size else 0.0
                k_g = eps_inf * (1.0 + tau * g_inf) / denom
                k_y = eps_inf * (1.0 + tau * y0_inf) / denom
                extra = noise.w_inf * k_g + k_y
                _add_dual_norm_rows(prog, phis, polytope, noise, y0_hat, p, m, N,
                                    coef_extra_yy=extra, denom=denom)
            else:
                if hyper.tau is not None:
                    prog.add_matrix_inf_norm(phis[2], hyper.tau)
                _add_dual_norm_rows(prog, phis, polytope, noise, y0_hat, p, m, N)
    sol = prog.solve(solver=solver)
    if sol.status is not SolveStatus.OPTIMAL:
        status = sol.status if sol.status is SolveStatus.NUMERICAL_FAILURE \
            else SolveStatus.INFEASIBLE
        return SynthesisResult(status, None, None, hyper, math.inf, math.inf)
    maps = _extract_maps(prog, p, m, N)
    K = controller_from_responses(maps)
    j_inner = float(sol.objective_value)
    outer = 1.0 / (1.0 - eps2 * hyper.gamma) if hyper.gamma is not None else 1.0
    r1, r2 = achievability_residual(maps, G_hat)
    verification = {
        "achievability": max(r1, r2),
        "primal_residual": sol.residuals.primal,
        "spectral_cap_slack": (hyper.gamma - mat_two_norm(maps.phi_uy))
        if hyper.gamma is not None else None,
        "inf_cap_slack": (hyper.tau - mat_inf_norm(maps.phi_uy))
        if hyper.tau is not None else None,
    }
    if has_rows:
        slack = math.inf
        y_rows, u_rows = _row_selectors(polytope, N)
        s = polytope.F_y.shape[0]
        su = polytope.F_u.shape[0]
        tau_eval = hyper.tau if eps_inf > 0 else 0.0
        for t, i, _, bound in y_rows:
            terms = tightened_lhs_f(maps, t * s + i, tau_eval or 0.0, eps_inf,
                                    G_hat, y0_hat, noise, polytope)
            slack = min(slack, bound - terms.f_y)
        for t, i, _, bound in u_rows:
            terms = tightened_lhs_f(maps, t * su + i, tau_eval or 0.0, eps_inf,
                                    G_hat, y0_hat, noise, polytope)
            slack = min(slack, bound - terms.f_u)
        verification["tightened_slack"] = slack
    return SynthesisResult(SolveStatus.OPTIMAL, K, maps, hyper,
                           j_inner=j_inner, j_robust=outer * j_inner,
                           verification=verification)


def robust_cost(bundle: EstimateBundle, polytope: Optional[SafetyPolytope],
                noise: NoiseSpec, hyper: HyperParams,
                weights: Optional[CostWeights] = None,
                solver: str = "CLARABEL") -> float:
    """Certified cost J_robust(gamma, tau); +inf when the inner program is
    infeasible."""
    result = solve_robust_inner(bundle, polytope, noise, hyper, weights, solver)
    return result.j_robust if result.is_optimal else math.inf


def _default_tau_grid(eps_inf: float) -> tuple[float, ...]:
    return (0.0,) + tuple(np.geomspace(1e-3 / eps_inf, 0.999 / eps_inf, 32))


def _evaluate_point(args) -> tuple[int, float, Optional[float], Optional[float]]:
    (idx, bundle, polytope, noise, hyper, weights, solver) = args
    cost = robust_cost(bundle, polytope, noise, hyper, weights, solver)
    return idx, cost, hyper.gamma, hyper.tau


def _better(cost, gamma, tau, best) -> bool:
    """Tie-break equal costs by smaller gamma, then smaller tau."""
    b_cost, b_gamma, b_tau = best
    if cost < b_cost - 1e-9:
        return True
    if cost > b_cost + 1e-9:
        return False
    key = (gamma if gamma is not None else -1.0, tau if tau is not None else -1.0)
    b_key = (b_gamma if b_gamma is not None else -1.0, b_tau if b_tau is not None else -1.0)
    return key < b_key


def search_hyperparams(bundle: EstimateBundle, polytope: Optional[SafetyPolytope],
                       noise: NoiseSpec,
                       strategy: Union[GridRandom, GoldenGamma],
                       weights: Optional[CostWeights] = None,
                       alpha: Optional[float] = None,
                       threads: int = 1,
                       solver: str = "CLARABEL") -> SynthesisResult:
    """Minimize J_robust over the hyper-parameter box.

    ``GridRandom`` samples uniform (gamma, tau) pairs; ``GoldenGamma`` runs a
    golden-section search in gamma for every tau in a grid.  Ties are broken
    toward smaller gamma, then smaller tau.  When both error levels are zero
    this reduces to a single nominal solve on the estimated plant.
    """
    eps2, eps_inf = bundle.require_errors()
    p, m, N = bundle.p, bundle.m, bundle.N
    if eps2 == 0.0 and eps_inf == 0.0:
        return solve_nominal(bundle.g_column, bundle.y0_hat, polytope, noise,
                             weights, p=p, m=m, solver=solver)
    if alpha is None:
        alpha = (1.0 - 1e-3) / eps2 if eps2 > 0 else None
    gamma_max = min(alpha, (1.0 - _GAMMA_MARGIN) / eps2) if eps2 > 0 else None
    has_rows = polytope is not None and any(_row_selectors(polytope, N))
    need_tau = eps_inf > 0 and has_rows

    def hyper_at(gamma, tau) -> HyperParams:
        return HyperParams(gamma=gamma, tau=tau if need_tau else None, alpha=alpha)

    evaluations = 0
    best = (math.inf, None, None)

    if isinstance(strategy, GridRandom):
        rng = np.random.default_rng(strategy.seed)
        pairs = []
        for _ in range(strategy.n_points):
            gamma = float(rng.uniform(0.0, gamma_max)) if gamma_max is not None else None
            tau = float(rng.uniform(0.0, (1.0 - _GAMMA_MARGIN) / eps_inf)) if need_tau else None
            pairs.append((gamma, tau))
        tasks = [(i, bundle, polytope, noise, hyper_at(g, t), weights, solver)
                 for i, (g, t) in enumerate(pairs)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = sorted(pool.map(_evaluate_point, tasks))
        else:
            results = [_evaluate_point(task) for task in tasks]
        evaluations = len(results)
        for _, cost, gamma, tau in results:
            if _better(cost, gamma, tau, best):
                best = (cost, gamma, tau)
    elif isinstance(strategy, GoldenGamma):
        if need_tau:
            taus = strategy.tau_grid if strategy.tau_grid is not None \
                else _default_tau_grid(eps_inf)
        else:
            taus = (None,)
        counter = [0]

        def run_tau(tau) -> tuple[float, Optional[float], Optional[float]]:
            if gamma_max is None:
                cost = robust_cost(bundle, polytope, noise, hyper_at(None, tau),
                                   weights, solver)
                counter[0] += 1
                return cost, None, tau

            def f(gamma: float) -> float:
                counter[0] += 1
                return robust_cost(bundle, polytope, noise, hyper_at(gamma, tau),
                                   weights, solver)

            g_best, cost = golden_section(f, 0.0, gamma_max, iters=strategy.iters)
            return cost, g_best, tau

        if threads > 1 and len(taus) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                tau_results = list(pool.map(_run_tau_task,
                                            [(bundle, polytope, noise, weights, solver,
                                              alpha, gamma_max, need_tau, tau,
                                              strategy.iters) for tau in taus]))
            for cost, gamma, tau, n_evals in tau_results:
                counter[0] += n_evals
                if _better(cost, gamma, tau, best):
                    best = (cost, gamma, tau)
        else:
            for tau in taus:
                cost, gamma, tau_out = run_tau(tau)
                if _better(cost, gamma, tau_out, best):
                    best = (cost, gamma, tau_out)
        evaluations = counter[0]
    else:
        raise TypeError(f"unknown strategy {type(strategy).__name__}")

    cost, gamma, tau = best
    if not math.isfinite(cost):
        return SynthesisResult(SolveStatus.INFEASIBLE, None, None, None,
                               math.inf, math.inf, evaluations=evaluations)
    result = solve_robust_inner(bundle, polytope, noise, hyper_at(gamma, tau),
                                weights, solver)
    return replace(result, evaluations=evaluations + 1)


def _run_tau_task(args):
    (bundle, polytope, noise, weights, solver, alpha, gamma_max, need_tau, tau,
     iters) = args
    count = [0]

    def hyper_at(gamma):
        return HyperParams(gamma=gamma, tau=tau if need_tau else None, alpha=alpha)

    if gamma_max is None:
        cost = robust_cost(bundle, polytope, noise, hyper_at(None), weights, solver)
        return cost, None, tau, 1

    def f(gamma):
        count[0] += 1
        return robust_cost(bundle, polytope, noise, hyper_at(gamma), weights, solver)

    g_best, cost = golden_section(f, 0.0, gamma_max, iters=iters)
    return cost, g_best, tau, count[0]


@dataclass(frozen=True)
class OracleResult:
    status: SolveStatus
    maps_c: Optional[ClosedLoopMaps]
    controller: Optional[np.ndarray]
    j_program: float


def solve_tightened_oracle(true_g_column: np.ndarray, true_y0: np.ndarray,
                           bundle: EstimateBundle,
                           polytope: Optional[SafetyPolytope], noise: NoiseSpec,
                           phi_star_norms: tuple[float, float],
                           weights: Optional[CostWeights] = None,
                           solver: str = "CLARABEL") -> OracleResult:
    """Diagnostic program on the TRUE plant with doubly-tightened constraints.

    Caps the response norms at the nominal optimum's values and tightens the
    safety rows with 1 - 2*zeta denominators, zeta = eps_inf * ||Phi*_uy||_inf.
    Infeasibility for large eps_inf is the expected outcome, not an error.
    """
    eps_inf = bundle.eps_inf if bundle.eps_inf is not None else 0.0
    star2, star_inf = float(phi_star_norms[0]), float(phi_star_norms[1])
    zeta = eps_inf * star_inf
    if zeta >= 0.5:
        return OracleResult(SolveStatus.INFEASIBLE, None, None, math.inf)
    p, m = bundle.p, bundle.m
    true_g_column = np.asarray(true_g_column, dtype=float).reshape(-1, m)
    true_y0 = np.asarray(true_y0, dtype=float).ravel()
    N = true_g_column.shape[0] // p
    weights = _weights_or_identity(weights, p, m, N)
    G = ToeplitzOperator(true_g_column, p=p, m=m)
    prog = ConicProgram("tightened_oracle")
    phis = _declare_maps(prog, p, m, N)
    _add_achievability(prog, phis, G.dense(), p, m, N)
    _add_objective(prog, phis, true_y0, weights)
    # caps come from a numerically solved program; a tiny relative margin
    # keeps the nominal optimum strictly feasible for the interior-point solver
    margin = 1.0 + 1e-7
    prog.add_spectral_norm(phis[2], margin * star2, mode="psd")
    prog.add_matrix_inf_norm(phis[2], margin * star_inf)
    if polytope is not None:
        denom = 1.0 - 2.0 * zeta
        G_hat = ToeplitzOperator(bundle.g_column, p=p, m=m)
        g_inf = mat_inf_norm(G_hat.dense())
        y0_inf = float(np.max(np.abs(bundle.y0_hat))) if bundle.y0_hat.size else 0.0
        k_g = 2.0 * (eps_inf + zeta * g_inf) / denom
        k_y = 2.0 * (eps_inf + zeta * y0_inf) / denom
        extra = noise.w_inf * k_g + k_y
        _add_dual_norm_rows(prog, phis, polytope, noise, bundle.y0_hat, p, m, N,
                            coef_extra_yy=extra, denom=denom)
    sol = prog.solve(solver=solver)
    if sol.status is not SolveStatus.OPTIMAL:
        status = sol.status if sol.status is SolveStatus.NUMERICAL_FAILURE \
            else SolveStatus.INFEASIBLE
        return OracleResult(status, None, None, math.inf)
    maps = _extract_maps(prog, p, m, N)
    return OracleResult(SolveStatus.OPTIMAL, maps, controller_from_responses(maps),
                        float(sol.objective_value))


@dataclass(frozen=True)
class SCurvePoint:
    eps_inf: float
    S: float
    feasible: bool


def suboptimality_gap_S(true_g_column: np.ndarray, true_y0: np.ndarray,
                        bundle: EstimateBundle,
                        polytope: Optional[SafetyPolytope], noise: NoiseSpec,
                        eps_inf_grid: Sequence[float],
                        weights: Optional[CostWeights] = None,
                        solver: str = "CLARABEL"
                        ) -> tuple[list[SCurvePoint], SynthesisResult]:
    """Tightening-induced suboptimality S(eps_inf) over a grid.

    For each grid point the oracle program is solved with the bundle's error
    level overridden, the resulting controller is evaluated on the true plant
    and S = (J_c^2 - J*^2) / J*^2; infeasible points carry S = +inf.
    """
    from .iop import cost_j, responses_from_controller
    p, m = bundle.p, bundle.m
    true_g_column = np.asarray(true_g_column, dtype=float).reshape(-1, m)
    true_y0 = np.asarray(true_y0, dtype=float).ravel()
    N = true_g_column.shape[0] // p
    weights = _weights_or_identity(weights, p, m, N)
    nominal = solve_nominal(true_g_column, true_y0, polytope, noise, weights,
                            p=p, m=m, solver=solver)
    if not nominal.is_optimal:
        raise RuntimeError("nominal program on the true plant failed: "
                           f"{nominal.status.value}")
    j_star = nominal.j_inner
    star_norms = (mat_two_norm(nominal.maps_hat.phi_uy),
                  mat_inf_norm(nominal.maps_hat.phi_uy))
    G_true = ToeplitzOperator(true_g_column, p=p, m=m)
    points = []
    for eps_inf in eps_inf_grid:
        trial = replace(bundle, eps_inf=float(eps_inf))
        oracle = solve_tightened_oracle(true_g_column, true_y0, trial, polytope,
                                        noise, star_norms, weights, solver)
        if oracle.status is not SolveStatus.OPTIMAL:
            points.append(SCurvePoint(float(eps_inf), math.inf, False))
            continue
        true_maps = responses_from_controller(oracle.controller, G_true)
        j_c = cost_j(true_maps, true_y0, weights)
        S = (j_c * j_c - j_star * j_star) / (j_star * j_star)
        points.append(SCurvePoint(float(eps_inf), float(S), True))
    return points, nominal


def bound_from_terms(eta: float, M_c: float, V_c: float, S_eps: float) -> float:
    """Certificate arithmetic 20*eta + 4*(M_c + V_c) + 4*S*(1 + M_c + V_c)."""
    if not math.isfinite(S_eps):
        return math.inf
    return 20.0 * eta + 4.0 * (M_c + V_c) + 4.0 * S_eps * (1.0 + M_c + V_c)


def theoretical_bound(phi_star_norms: tuple[float, float], eps2: float,
                      eps_inf: float, alpha: float,
                      g_hat: np.ndarray, y0_hat: np.ndarray,
                      truth_norms: tuple[float, float],
                      maps_c_norm2: float, S_eps: float,
                      p: int = 1, m: int = 1) -> BoundTerms:
    """Assemble the relative-suboptimality certificate
    20*eta + 4*(M_c + V_c) + 4*S*(1 + M_c + V_c)."""
    star2, star_inf = float(phi_star_norms[0]), float(phi_star_norms[1])
    eta = eps2 * star2
    zeta = eps_inf * star_inf
    g_hat_2 = mat_two_norm(toeplitz_expand(np.asarray(g_hat, dtype=float).reshape(-1, m), p, m))
    y0_hat_2 = float(np.linalg.norm(y0_hat))
    G2, y02 = float(truth_norms[0]), float(truth_norms[1])
    M_c = (h_value(eps2, alpha, g_hat_2) + h_value(eps2, alpha, y0_hat_2)
           + h_value(eps2, maps_c_norm2, G2) + h_value(eps2, maps_c_norm2, y02))
    V_c = h_value(eps2, alpha, y0_hat_2) + h_value(eps2, maps_c_norm2, y02)
    violations = []
    if eta >= 0.2:
        violations.append(f"eta = {eta:.4f} >= 1/5")
    if zeta >= 0.5:
        violations.append(f"zeta = {zeta:.4f} >= 1/2")
    if eps2 > 0:
        lo = math.sqrt(2.0) * eta / (eps2 * (1.0 - eta)) if eta < 1 else math.inf
        if not (lo <= alpha <= 5.0 * star2):
            violations.append(
                f"alpha = {alpha:.4g} outside [{lo:.4g}, {5.0 * star2:.4g}]")
    bound = bound_from_terms(eta, M_c, V_c, S_eps)
    return BoundTerms(eta=float(eta), zeta=float(zeta), M_c=float(M_c),
                      V_c=float(V_c), S_eps=float(S_eps), bound_value=float(bound),
                      certified=not violations, violations=tuple(violations))


def safe_exploration_policy(rough_bundle: EstimateBundle, eta_inf: float,
                            polytope: Optional[SafetyPolytope], noise: NoiseSpec,
                            strategy: Union[GridRandom, GoldenGamma, None] = None,
                            weights: Optional[CostWeights] = None,
                            alpha: Optional[float] = None,
                            threads: int = 1,
                            solver: str = "CLARABEL") -> SynthesisResult:
    """Synthesize a feedback gain that keeps exploration rollouts safe.

    The probing signal of magnitude up to ``eta_inf`` is absorbed into the
    input-noise bound, so any feasible robust solution certifies safety of
    u = K_r y + probe + w on every admissible plant.
    """
    if eta_inf < 0:
        raise ValueError("eta_inf must be nonnegative")
    inflated = replace(noise, w_inf=noise.w_inf + float(eta_inf))
    if strategy is None:
        strategy = GoldenGamma()
    return search_hyperparams(rough_bundle, polytope, inflated, strategy,
                              weights=weights, alpha=alpha, threads=threads,
                              solver=solver)
