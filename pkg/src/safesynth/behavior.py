"""Hankel-matrix algebra and behavioral estimation of plant responses.

Given one long historical input-output trajectory and a short recent one,
the depth-(T_ini + N) Hankel matrices of the data characterize every
length-N system trajectory.  Solving the resulting linear systems yields the
first block-column of the impulse-response operator (through Y_f G) and the
free response from the implicitly encoded initial state (through Y_f g).
Two estimators are provided for noise-corrupted data: plain least squares via
the pseudoinverse, and a likelihood-based estimator that keeps the input-side
equations as hard constraints while softly fitting the noisy output-side
equations with a signal-dependent noise scale.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space

from .iop import mat_inf_norm, mat_two_norm, toeplitz_expand
from .plant import DimensionError, SignalTrajectory

__all__ = [
    "RankDeficientDataError",
    "DataRecord",
    "HankelPartition",
    "EstimateBundle",
    "PEReport",
    "build_hankel",
    "check_pe",
    "partition_data",
    "estimate_ls",
    "estimate_ml",
    "OracleTruth",
    "BootstrapPlan",
    "assess_errors",
    "record_to_csv",
    "record_from_csv",
]

# Relative singular-value cutoff separating structural rank from noise rank.
RANK_RTOL = 1e-10


class RankDeficientDataError(ValueError):
    """Input-side Hankel equations are inconsistent (input not exciting enough)."""


@dataclass(frozen=True)
class DataRecord:
    """Historical trajectory of length T plus a recent one of length T_ini."""

    u_hist: SignalTrajectory
    y_hist: SignalTrajectory
    u_recent: SignalTrajectory
    y_recent: SignalTrajectory
    T_ini: int
    N: int

    def __post_init__(self):
        if self.T_ini < 1:
            raise ValueError("T_ini must be >= 1")
        if self.u_hist.steps != self.y_hist.steps:
            raise DimensionError("y_hist steps", self.u_hist.steps, self.y_hist.steps)
        if self.u_recent.steps != self.T_ini:
            raise DimensionError("u_recent steps", self.T_ini, self.u_recent.steps)
        if self.y_recent.steps != self.T_ini:
            raise DimensionError("y_recent steps", self.T_ini, self.y_recent.steps)

    @property
    def T(self) -> int:
        return self.u_hist.steps

    @property
    def m(self) -> int:
        return self.u_hist.dim

    @property
    def p(self) -> int:
        return self.y_hist.dim

    def warn_if_short(self, n_hint: int) -> bool:
        """Warn when T is below the excitation prerequisite
        T >= (m+1)(n + T_ini + N) - 1 for an order-n plant."""
        need = (self.m + 1) * (n_hint + self.T_ini + self.N) - 1
        if self.T < need:
            warnings.warn(f"historical length T={self.T} below excitation "
                          f"prerequisite {need}", stacklevel=2)
            return True
        return False


@dataclass(frozen=True)
class HankelPartition:
    """Past/future split of the depth-(T_ini + N) Hankel matrices."""

    U_p: np.ndarray
    U_f: np.ndarray
    Y_p: np.ndarray
    Y_f: np.ndarray

    @property
    def columns(self) -> int:
        return self.U_p.shape[1]


@dataclass(frozen=True)
class EstimateBundle:
    """Estimated impulse-response block-column and free response, with the
    norm error levels (set by ``assess_errors`` or supplied externally).

    eps2 bounds both the induced 2-norm of the Toeplitz estimation error and
    the 2-norm of the free-response error; eps_inf the corresponding
    infinity-norms.  The four per-quantity errors are kept when available.
    """

    g_column: np.ndarray   # (p*N, m)
    y0_hat: np.ndarray     # (p*N,)
    p: int
    m: int
    eps2: Optional[float] = None
    eps_inf: Optional[float] = None
    eps2_g: Optional[float] = None
    eps2_y: Optional[float] = None
    eps_inf_g: Optional[float] = None
    eps_inf_y: Optional[float] = None

    def __post_init__(self):
        g = np.asarray(self.g_column, dtype=float).reshape(-1, self.m)
        y0 = np.asarray(self.y0_hat, dtype=float).ravel()
        if g.shape[0] % self.p:
            raise DimensionError("g_column rows", f"multiple of {self.p}", g.shape[0])
        if y0.size != g.shape[0]:
            raise DimensionError("y0_hat", g.shape[0], y0.size)
        for name, val in (("eps2", self.eps2), ("eps_inf", self.eps_inf)):
            if val is not None and val < 0:
                raise ValueError(f"{name} must be nonnegative")
        object.__setattr__(self, "g_column", g)
        object.__setattr__(self, "y0_hat", y0)

    @property
    def N(self) -> int:
        return self.g_column.shape[0] // self.p

    def with_errors(self, eps2: float, eps_inf: float, **components) -> "EstimateBundle":
        return replace(self, eps2=float(eps2), eps_inf=float(eps_inf), **components)

    def require_errors(self) -> tuple[float, float]:
        if self.eps2 is None or self.eps_inf is None:
            raise ValueError("estimate error levels are unset; run assess_errors first")
        return float(self.eps2), float(self.eps_inf)


def build_hankel(signal: SignalTrajectory, depth: int) -> np.ndarray:
    """Depth-L block Hankel matrix; block (i, j) is sample i + j.

    Shape (d*L, T-L+1) for a length-T signal of d-vectors.
    """
    T, d = signal.steps, signal.dim
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if depth > T:
        raise ValueError(f"depth {depth} exceeds signal length {T}")
    cols = T - depth + 1
    M = signal.as_matrix()
    H = np.empty((d * depth, cols))
    for i in range(depth):
        H[i * d:(i + 1) * d] = M[i:i + cols].T
    return H


@dataclass(frozen=True)
class PEReport:
    is_pe: bool
    rank: int
    singular_values: np.ndarray


def check_pe(inputs: SignalTrajectory, order: int) -> PEReport:
    """Persistency of excitation: the depth-L input Hankel must have full
    row rank m*L.  Rank uses the relative cutoff RANK_RTOL * sigma_max."""
    m = inputs.dim
    if order > inputs.steps:
        return PEReport(False, 0, np.zeros(0))
    H = build_hankel(inputs, order)
    sv = np.linalg.svd(H, compute_uv=False)
    rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
    return PEReport(rank == m * order, rank, sv)


def partition_data(record: DataRecord) -> HankelPartition:
    """Split the depth-(T_ini + N) Hankel matrices into past and future rows."""
    depth = record.T_ini + record.N
    if record.T < depth:
        raise ValueError(f"historical length {record.T} below T_ini + N = {depth}")
    Hu = build_hankel(record.u_hist, depth)
    Hy = build_hankel(record.y_hist, depth)
    mi = record.m * record.T_ini
    pi = record.p * record.T_ini
    return HankelPartition(U_p=Hu[:mi], U_f=Hu[mi:], Y_p=Hy[:pi], Y_f=Hy[pi:])


def _ls_rhs(partition: HankelPartition, record: DataRecord) -> tuple[np.ndarray, np.ndarray]:
    m, p, N, T_ini = record.m, record.p, record.N, record.T_ini
    rhs_G = np.zeros(((m + p) * T_ini + m * N, m))
    rhs_G[(m + p) * T_ini:(m + p) * T_ini + m] = np.eye(m)
    rhs_g = np.concatenate([record.u_recent.values, record.y_recent.values,
                            np.zeros(m * N)])
    return rhs_G, rhs_g


def _finish_bundle(partition: HankelPartition, record: DataRecord, G: np.ndarray,
                   g: np.ndarray, enforce_strict_causality: bool) -> EstimateBundle:
    g_column = partition.Y_f @ G
    y0_hat = partition.Y_f @ g
    if enforce_strict_causality:
        g_column = g_column.copy()
        g_column[:record.p] = 0.0  # one-step input delay: leading block is zero
    return EstimateBundle(g_column=g_column, y0_hat=y0_hat, p=record.p, m=record.m)


def estimate_ls(partition: HankelPartition, record: DataRecord,
                enforce_strict_causality: bool = True) -> EstimateBundle:
    """Least-squares estimator: minimum-norm solution of the stacked
    past/future data equations via an SVD pseudoinverse."""
    if partition.columns == 0:
        raise ValueError("empty partition")
    S = np.vstack([partition.U_p, partition.Y_p, partition.U_f])
    rhs_G, rhs_g = _ls_rhs(partition, record)
    S_pinv = np.linalg.pinv(S, rcond=RANK_RTOL)
    G = S_pinv @ rhs_G
    g = S_pinv @ rhs_g
    return _finish_bundle(partition, record, G, g, enforce_strict_causality)


class _RidgePath:
    """Closed-form solutions of min ||A(c0 + Z xi) - t||^2 + mu ||c0 + Z xi||^2.

    Z is an orthonormal null-space basis and c0 the minimum-norm particular
    solution of the equality constraints, so c0 is orthogonal to range(Z) and
    one SVD of A Z yields the whole regularization path; evaluating a point
    costs O(rank).
    """

    def __init__(self, A: np.ndarray, Z: np.ndarray):
        self.Z = Z
        if Z.shape[1] == 0:
            self.S = np.zeros(0)
            return
        self.U, self.S, Wt = np.linalg.svd(A @ Z, full_matrices=False)
        self.W = Wt.T

    def solve(self, v: np.ndarray, mu: float) -> tuple[np.ndarray, float, float]:
        """Return (xi, residual^2 against v, ||xi||^2) at ridge weight mu."""
        if self.S.size == 0:
            return np.zeros(0), float(v @ v), 0.0
        uv = self.U.T @ v
        denom = self.S ** 2 + mu
        coeff = np.where(denom > 0, self.S * uv / np.where(denom > 0, denom, 1.0), 0.0)
        misfit = np.where(denom > 0, mu * uv / np.where(denom > 0, denom, 1.0), uv)
        r2 = float(misfit @ misfit) + float(v @ v) - float(uv @ uv)
        return self.W @ coeff, r2, float(coeff @ coeff)


def _ml_column(path: _RidgePath, target: np.ndarray, c0: np.ndarray,
               A: np.ndarray, sigma: float) -> np.ndarray:
    """Minimize the signal-scaled Gaussian surrogate over {c = c0 + Z xi}.

    Objective: ||A c - t||^2 / (2 sigma^2 (1 + ||c||^2))
               + (d/2) log(sigma^2 (1 + ||c||^2)).
    Every stationary point with nonnegative shrinkage lies on the
    equality-constrained ridge path, so a one-dimensional search over the
    ridge weight finds the minimizer.
    """
    d = A.shape[0]
    v = target - A @ c0
    base = float(c0 @ c0)

    def objective(mu: float) -> float:
        _, r2, n2 = path.solve(v, mu)
        s = 1.0 + base + n2
        return r2 / (2.0 * sigma * sigma * s) + 0.5 * d * math.log(sigma * sigma * s)

    scale = float(path.S[0] ** 2) if path.S.size and path.S[0] > 0 else 1.0
    grid = np.concatenate([[0.0], scale * np.logspace(-12.0, 8.0, 41)])
    values = [objective(mu) for mu in grid]
    k = int(np.argmin(values))
    # golden-section refinement on log(mu) around the best grid point
    lo = grid[max(k - 1, 1)] if k > 0 else scale * 1e-13
    hi = grid[min(k + 1, len(grid) - 1)] if k + 1 < len(grid) else grid[-1] * 10.0
    if hi > lo > 0:
        ratio = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = math.log(lo), math.log(hi)
        x1, x2 = b - ratio * (b - a), a + ratio * (b - a)
        f1, f2 = objective(math.exp(x1)), objective(math.exp(x2))
        for _ in range(40):
            if f1 <= f2:
                b, x2, f2 = x2, x1, f1
                x1 = b - ratio * (b - a)
                f1 = objective(math.exp(x1))
            else:
                a, x1, f1 = x1, x2, f2
                x2 = a + ratio * (b - a)
                f2 = objective(math.exp(x2))
        mu_best = math.exp((a + b) / 2.0)
        if objective(mu_best) > values[k]:
            mu_best = grid[k]
    else:
        mu_best = grid[k]
    xi, _, _ = path.solve(v, mu_best)
    return c0 + path.Z @ xi


def estimate_ml(partition: HankelPartition, record: DataRecord, sigma: float,
                enforce_strict_causality: bool = True) -> EstimateBundle:
    """Likelihood-based estimator with signal-dependent noise scaling.

    The input-side Hankel equations are enforced exactly; the output-side
    equations enter a Gaussian misfit whose variance grows with the squared
    norm of the solution, reflecting that output noise is amplified by the
    trajectory combination weights.  Solved per column along the
    equality-constrained ridge path (one SVD, then a scalar search).

    The impulse-response columns have exact structural zeros as targets, so
    the surrogate's shrinkage strictly reduces noise amplification there; the
    free-response column instead carries all initial-state information in its
    noisy targets, where the minimum-norm interpolant is the variance-optimal
    unbiased choice within this estimator form, so that column coincides with
    the least-squares one.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if partition.columns == 0:
        raise ValueError("empty partition")
    m, p, N, T_ini = record.m, record.p, record.N, record.T_ini
    E = np.vstack([partition.U_p, partition.U_f])
    A = partition.Y_p
    Z = null_space(E, rcond=RANK_RTOL)
    E_pinv = np.linalg.pinv(E, rcond=RANK_RTOL)
    path = _RidgePath(A, Z)

    def solve_constrained(rhs_eq: np.ndarray, target: np.ndarray) -> np.ndarray:
        c0 = E_pinv @ rhs_eq
        if np.max(np.abs(E @ c0 - rhs_eq)) > 1e-6 * max(1.0, np.max(np.abs(rhs_eq))):
            raise RankDeficientDataError(
                "input-side Hankel equations are inconsistent; historical input "
                f"is not persistently exciting of order {T_ini + N}")
        return _ml_column(path, target, c0, A, sigma)

    G = np.empty((partition.columns, m))
    for i in range(m):
        rhs_eq = np.zeros(m * T_ini + m * N)
        rhs_eq[m * T_ini + i] = 1.0
        G[:, i] = solve_constrained(rhs_eq, np.zeros(A.shape[0]))
    # minimum-norm interpolant for the free response, same route as least
    # squares so the two estimators agree on this column exactly
    S = np.vstack([partition.U_p, partition.Y_p, partition.U_f])
    _, rhs_g = _ls_rhs(partition, record)
    g = np.linalg.pinv(S, rcond=RANK_RTOL) @ rhs_g
    return _finish_bundle(partition, record, G, g, enforce_strict_causality)


@dataclass(frozen=True)
class OracleTruth:
    """Ground-truth responses for error assessment."""

    g_column: np.ndarray
    y0: np.ndarray


@dataclass(frozen=True)
class BootstrapPlan:
    """Re-estimate on noise-perturbed copies of the data and take the 90th
    percentile of the deviations from the point estimate."""

    estimator: Callable[[HankelPartition, DataRecord], EstimateBundle]
    record: DataRecord
    sigma: float
    resamples: int = 200
    seed: int = 0
    percentile: float = 90.0


def _error_norms(bundle: EstimateBundle, g_column: np.ndarray, y0: np.ndarray
                 ) -> tuple[float, float, float, float]:
    delta_col = np.asarray(g_column, dtype=float).reshape(-1, bundle.m) - bundle.g_column
    delta = toeplitz_expand(delta_col, bundle.p, bundle.m)
    d0 = np.asarray(y0, dtype=float).ravel() - bundle.y0_hat
    return (mat_two_norm(delta), float(np.linalg.norm(d0)),
            mat_inf_norm(delta), float(np.max(np.abs(d0))) if d0.size else 0.0)


def _perturbed_record(record: DataRecord, sigma: float, rng: np.random.Generator
                      ) -> DataRecord:
    def jiggle(sig: SignalTrajectory) -> SignalTrajectory:
        return SignalTrajectory(sig.values + rng.normal(0.0, sigma, sig.values.size),
                                sig.dim)
    return replace(record, u_hist=jiggle(record.u_hist), y_hist=jiggle(record.y_hist),
                   u_recent=jiggle(record.u_recent), y_recent=jiggle(record.y_recent))


def assess_errors(bundle: EstimateBundle, mode) -> EstimateBundle:
    """Fill in the (eps2, eps_inf) error levels of an estimate.

    With ``OracleTruth`` the errors are exact: the induced norms of the
    Toeplitz difference and the vector norms of the free-response difference.
    With ``BootstrapPlan`` the estimator is re-run on perturbed data and the
    90th percentile of the deviations is used.
    """
    if isinstance(mode, OracleTruth):
        truth_col = np.asarray(mode.g_column, dtype=float).reshape(-1, bundle.m)
        if truth_col.shape != bundle.g_column.shape:
            raise DimensionError("truth g_column", bundle.g_column.shape, truth_col.shape)
        e2g, e2y, eig, eiy = _error_norms(bundle, mode.g_column, mode.y0)
        return bundle.with_errors(max(e2g, e2y), max(eig, eiy),
                                  eps2_g=e2g, eps2_y=e2y, eps_inf_g=eig, eps_inf_y=eiy)
    if isinstance(mode, BootstrapPlan):
        rng = np.random.default_rng(mode.seed)
        devs = np.empty((mode.resamples, 4))
        for r in range(mode.resamples):
            rec = _perturbed_record(mode.record, mode.sigma, rng)
            boot = mode.estimator(partition_data(rec), rec)
            devs[r] = _error_norms(bundle, boot.g_column, boot.y0_hat)
        e2g, e2y, eig, eiy = np.percentile(devs, mode.percentile, axis=0)
        return bundle.with_errors(max(e2g, e2y), max(eig, eiy),
                                  eps2_g=float(e2g), eps2_y=float(e2y),
                                  eps_inf_g=float(eig), eps_inf_y=float(eiy))
    raise TypeError(f"unsupported assessment mode {type(mode).__name__}")


def record_to_csv(record: DataRecord, directory) -> tuple[Path, Path]:
    """Write the record as a CSV pair (u.csv, y.csv).

    Each file holds the historical trajectory followed by the recent one,
    with header ``t, dim_0, ...``; the recent rows carry negative times
    -T_ini .. -1 so the split is recoverable.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, hist, recent in (("u", record.u_hist, record.u_recent),
                               ("y", record.y_hist, record.y_recent)):
        path = directory / f"{name}.csv"
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + [f"dim_{i}" for i in range(hist.dim)])
            for t, row in enumerate(hist.as_matrix()):
                writer.writerow([t] + [f"{x:.17g}" for x in row])
            for t, row in enumerate(recent.as_matrix()):
                writer.writerow([t - record.T_ini] + [f"{x:.17g}" for x in row])
        paths.append(path)
    return tuple(paths)


def record_from_csv(u_path, y_path, N: int) -> DataRecord:
    """Load a record written by ``record_to_csv``; negative times are the
    recent trajectory."""
    def load(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ValueError(f"{path}: expected header starting with 't'")
        times = np.array([int(r[0]) for r in body])
        data = np.array([[float(x) for x in r[1:]] for r in body])
        hist = data[times >= 0][np.argsort(times[times >= 0])]
        recent = data[times < 0][np.argsort(times[times < 0])]
        return SignalTrajectory.from_matrix(hist), SignalTrajectory.from_matrix(recent)

    u_hist, u_recent = load(u_path)
    y_hist, y_recent = load(y_path)
    if u_recent.steps != y_recent.steps:
        raise DimensionError("recent steps", u_recent.steps, y_recent.steps)
    return DataRecord(u_hist=u_hist, y_hist=y_hist, u_recent=u_recent,
                      y_recent=y_recent, T_ini=u_recent.steps, N=N)
