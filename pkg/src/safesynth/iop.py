"""Input-output closed-loop response algebra.

All operators act on stacked finite-horizon trajectories.  The plant is
represented by the block-Toeplitz operator built from the first block-column
of its impulse response; closed-loop behaviour is captured by the four
response maps

    [y; u] = [Phi_yy, Phi_yu; Phi_uy, Phi_uu] [v + y_free; w],

which are block lower-triangular by causality.  The module also provides the
scalar machinery used by the robust synthesis programs: worst-case constraint
values via the dual-norm identity, the h(eps, gamma, Y) inflation function,
and the tightened (f) and oracle (phi) constraint left-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .plant import DimensionError, NoiseSpec, SafetyPolytope, _check_causal

__all__ = [
    "ToeplitzOperator",
    "ClosedLoopMaps",
    "CostWeights",
    "block_causal_mask",
    "toeplitz_expand",
    "responses_from_controller",
    "controller_from_responses",
    "achievability_residual",
    "cost_j",
    "worst_case_lhs",
    "h_value",
    "tightened_lhs_f",
    "oracle_lhs_phi",
    "mat_inf_norm",
    "mat_two_norm",
]


def mat_inf_norm(M: np.ndarray) -> float:
    """Induced infinity-norm: max absolute row sum."""
    M = np.atleast_2d(M)
    return float(np.max(np.sum(np.abs(M), axis=1))) if M.size else 0.0

def mat_two_norm(M: np.ndarray) -> float:
    """Induced 2-norm: largest singular value."""
    M = np.atleast_2d(M)
    return float(np.linalg.svd(M, compute_uv=False)[0]) if M.size else 0.0


def block_causal_mask(N: int, block_rows: int, block_cols: int,
                      strict: bool = False) -> np.ndarray:
    """Boolean mask of a block lower-triangular (N*br, N*bc) matrix."""
    tri = np.tril(np.ones((N, N), dtype=bool), k=-1 if strict else 0)
    return np.kron(tri, np.ones((block_rows, block_cols), dtype=bool))


@dataclass(frozen=True)
class ToeplitzOperator:
    """Block lower-triangular Toeplitz operator defined by its first
    block-column (shape (p*N, m)); block (i, j) of the expansion is
    column block i-j for i >= j and zero otherwise."""

    first_block_column: np.ndarray
    p: int
    m: int

    def __post_init__(self):
        col = np.asarray(self.first_block_column, dtype=float)
        col = col.reshape(-1, self.m) if col.ndim == 1 else col
        if col.shape[0] % self.p or col.shape[1] != self.m:
            raise DimensionError("first_block_column", f"(p*N, {self.m})", col.shape)
        object.__setattr__(self, "first_block_column", col)

    @property
    def N(self) -> int:
        return self.first_block_column.shape[0] // self.p

    def dense(self) -> np.ndarray:
        return toeplitz_expand(self.first_block_column, self.p, self.m)


def toeplitz_expand(first_block_column: np.ndarray, p: int, m: int) -> np.ndarray:
    """Expand a (p*N, m) first block-column to the dense (p*N, m*N) operator."""
    col = np.asarray(first_block_column, dtype=float).reshape(-1, m)
    if col.shape[0] % p:
        raise DimensionError("first_block_column rows", f"multiple of {p}", col.shape[0])
    N = col.shape[0] // p
    out = np.zeros((p * N, m * N))
    for j in range(N):
        out[j * p:, j * m:(j + 1) * m] = col[:(N - j) * p]
    return out


@dataclass(frozen=True)
class ClosedLoopMaps:
    """The four closed-loop response maps with causal sparsity.

    phi_yy and phi_uu carry identity diagonal blocks, phi_yu has zero
    diagonal blocks (one-step plant delay) and phi_uy is block
    lower-triangular with free diagonal blocks.
    """

    phi_yy: np.ndarray
    phi_yu: np.ndarray
    phi_uy: np.ndarray
    phi_uu: np.ndarray
    p: int
    m: int

    def __post_init__(self):
        for name in ("phi_yy", "phi_yu", "phi_uy", "phi_uu"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def N(self) -> int:
        return self.phi_yy.shape[0] // self.p

    def stacked(self) -> np.ndarray:
        return np.block([[self.phi_yy, self.phi_yu], [self.phi_uy, self.phi_uu]])

    def sparsity_violation(self) -> float:
        """Largest magnitude entry violating the causal sparsity pattern."""
        N, p, m = self.N, self.p, self.m
        worst = 0.0
        for M, br, bc, strict in ((self.phi_yy, p, p, False), (self.phi_yu, p, m, True),
                                  (self.phi_uy, m, p, False), (self.phi_uu, m, m, False)):
            off = np.where(block_causal_mask(N, br, bc, strict=strict), 0.0, M)
            worst = max(worst, float(np.max(np.abs(off))) if off.size else 0.0)
        # identity diagonal blocks of phi_yy / phi_uu
        for M, d in ((self.phi_yy, p), (self.phi_uu, m)):
            for i in range(N):
                blk = M[i * d:(i + 1) * d, i * d:(i + 1) * d]
                worst = max(worst, float(np.max(np.abs(blk - np.eye(d)))))
        return worst

    @classmethod
    def open_loop(cls, G: ToeplitzOperator) -> "ClosedLoopMaps":
        """Maps obtained with zero feedback: (I, G, 0, I)."""
        p, m, N = G.p, G.m, G.N
        return cls(np.eye(p * N), G.dense(), np.zeros((m * N, p * N)),
                   np.eye(m * N), p=p, m=m)


def responses_from_controller(K: np.ndarray, G: ToeplitzOperator) -> ClosedLoopMaps:
    """Closed-loop maps achieved by applying gain K to plant G.

    I - G K is unit lower-triangular (G is strictly causal), so all four maps
    are computed with triangular solves; no general matrix inversion.
    """
    p, m, N = G.p, G.m, G.N
    K = np.asarray(K, dtype=float)
    _check_causal(K, m, p)
    Gd = G.dense()
    if K.shape != (m * N, p * N):
        raise DimensionError("K", (m * N, p * N), K.shape)
    A = np.eye(p * N) - Gd @ K
    phi_yy = solve_triangular(A, np.eye(p * N), lower=True, unit_diagonal=True)
    phi_yu = phi_yy @ Gd
    phi_uy = K @ phi_yy
    phi_uu = np.eye(m * N) + phi_uy @ Gd
    return ClosedLoopMaps(phi_yy, phi_yu, phi_uy, phi_uu, p=p, m=m)


def controller_from_responses(maps: ClosedLoopMaps) -> np.ndarray:
    """Recover K = Phi_uy Phi_yy^{-1} through a triangular solve."""
    K = solve_triangular(maps.phi_yy.T, maps.phi_uy.T, lower=False,
                         unit_diagonal=True).T
    return K


def achievability_residual(maps: ClosedLoopMaps, G: ToeplitzOperator
                           ) -> tuple[float, float]:
    """Frobenius residuals of the two affine achievability identities
    [I, -G] Phi = [I, 0] and Phi [-G; I] = [0; I]."""
    Gd = G.dense()
    pN = maps.phi_yy.shape[0]
    mN = maps.phi_uu.shape[0]
    r1_left = np.hstack([maps.phi_yy - Gd @ maps.phi_uy, maps.phi_yu - Gd @ maps.phi_uu])
    r1 = float(np.linalg.norm(r1_left - np.hstack([np.eye(pN), np.zeros((pN, mN))])))
    r2_top = -maps.phi_yy @ Gd + maps.phi_yu
    r2_bot = -maps.phi_uy @ Gd + maps.phi_uu
    r2 = float(np.sqrt(np.linalg.norm(r2_top) ** 2
                       + np.linalg.norm(r2_bot - np.eye(mN)) ** 2))
    return r1, r2


def _psd_sqrt(M: np.ndarray, floor: float = 0.0) -> np.ndarray:
    w, V = np.linalg.eigh(np.atleast_2d(M))
    w = np.clip(w, floor, None)
    return V @ np.diag(np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class CostWeights:
    """Quadratic cost weights Q_t, R_t and noise covariances Sigma_v, Sigma_w.

    Q_t must be positive semidefinite, R_t positive definite.  Defaults are
    identity weights at every step.
    """

    Q_blocks: np.ndarray  # (N, p, p)
    R_blocks: np.ndarray  # (N, m, m)
    Sigma_v: np.ndarray   # (p, p)
    Sigma_w: np.ndarray   # (m, m)

    def __post_init__(self):
        Q = np.asarray(self.Q_blocks, dtype=float)
        R = np.asarray(self.R_blocks, dtype=float)
        object.__setattr__(self, "Q_blocks", Q)
        object.__setattr__(self, "R_blocks", R)
        object.__setattr__(self, "Sigma_v", np.atleast_2d(np.asarray(self.Sigma_v, dtype=float)))
        object.__setattr__(self, "Sigma_w", np.atleast_2d(np.asarray(self.Sigma_w, dtype=float)))
        for name, blocks, floor in (("Q", Q, -1e-10), ("R", R, 1e-10)):
            for t, blk in enumerate(blocks):
                lo = float(np.min(np.linalg.eigvalsh(blk)))
                if lo < floor:
                    raise ValueError(f"{name}[{t}] eigenvalue {lo:.2e} below floor {floor:.0e}")
        for name, S in (("Sigma_v", self.Sigma_v), ("Sigma_w", self.Sigma_w)):
            lo = float(np.min(np.linalg.eigvalsh(S)))
            if lo < -1e-10:
                raise ValueError(f"{name} eigenvalue {lo:.2e} is negative")

    @classmethod
    def identity(cls, p: int, m: int, N: int) -> "CostWeights":
        return cls(Q_blocks=np.tile(np.eye(p), (N, 1, 1)),
                   R_blocks=np.tile(np.eye(m), (N, 1, 1)),
                   Sigma_v=np.eye(p), Sigma_w=np.eye(m))

    @property
    def N(self) -> int:
        return self.Q_blocks.shape[0]

    def q_sqrt(self) -> np.ndarray:
        from scipy.linalg import block_diag
        return block_diag(*[_psd_sqrt(blk) for blk in self.Q_blocks])

    def r_sqrt(self) -> np.ndarray:
        from scipy.linalg import block_diag
        return block_diag(*[_psd_sqrt(blk) for blk in self.R_blocks])

    def sigma_v_sqrt_big(self) -> np.ndarray:
        from scipy.linalg import block_diag
        return block_diag(*[_psd_sqrt(self.Sigma_v)] * self.N)

    def sigma_w_sqrt_big(self) -> np.ndarray:
        from scipy.linalg import block_diag
        return block_diag(*[_psd_sqrt(self.Sigma_w)] * self.N)

    def is_identity(self) -> bool:
        p = self.Q_blocks.shape[1]
        m = self.R_blocks.shape[1]
        return (np.allclose(self.Q_blocks, np.eye(p)) and np.allclose(self.R_blocks, np.eye(m))
                and np.allclose(self.Sigma_v, np.eye(p)) and np.allclose(self.Sigma_w, np.eye(m)))


def cost_j(maps: ClosedLoopMaps, y0: np.ndarray, weights: CostWeights) -> float:
    """Square root of the expected quadratic cost of a closed loop.

    Equals the Frobenius norm of

        [Q^1/2, 0; 0, R^1/2] Phi [Sigma_v^1/2, 0, y0; 0, Sigma_w^1/2, 0].
    """
    y0 = np.asarray(y0, dtype=float).ravel()
    if y0.size != maps.phi_yy.shape[1]:
        raise DimensionError("y0", maps.phi_yy.shape[1], y0.size)
    Qh, Rh = weights.q_sqrt(), weights.r_sqrt()
    Svh, Swh = weights.sigma_v_sqrt_big(), weights.sigma_w_sqrt_big()
    top = np.hstack([Qh @ maps.phi_yy @ Svh, Qh @ maps.phi_yu @ Swh,
                     (Qh @ maps.phi_yy @ y0)[:, None]])
    bot = np.hstack([Rh @ maps.phi_uy @ Svh, Rh @ maps.phi_uu @ Swh,
                     (Rh @ maps.phi_uy @ y0)[:, None]])
    return float(np.linalg.norm(np.vstack([top, bot])))


def _polytope_row(polytope: SafetyPolytope, N: int, j: int, kind: str) -> tuple[np.ndarray, float]:
    """Row j of the horizon-stacked constraint matrix I_N (x) F."""
    F = polytope.F_y if kind == "y" else polytope.F_u
    b = polytope.b_y if kind == "y" else polytope.b_u
    s, d = F.shape
    if not 0 <= j < s * N:
        raise IndexError(f"row {j} out of range for {s * N} stacked rows")
    t, i = divmod(j, s)
    row = np.zeros(d * N)
    row[t * d:(t + 1) * d] = F[i]
    return row, float(b[i])


def worst_case_lhs(maps: ClosedLoopMaps, polytope: SafetyPolytope, noise: NoiseSpec,
                   y0: np.ndarray, j: int) -> tuple[float, float]:
    """Worst-case value of stacked constraint row j over all bounded noises.

    By duality of the 1- and infinity-norms, the maximum of F_j * signal over
    ||v||_inf <= v_inf, ||w||_inf <= w_inf is

        v_inf ||F_j Phi_.y||_1 + w_inf ||F_j Phi_.u||_1 + F_j Phi_.y y0 .
    """
    y0 = np.asarray(y0, dtype=float).ravel()
    N = maps.N
    fy, _ = _polytope_row(polytope, N, j, "y")
    fu, _ = _polytope_row(polytope, N, j, "u")
    row_yy = fy @ maps.phi_yy
    row_yu = fy @ maps.phi_yu
    row_uy = fu @ maps.phi_uy
    row_uu = fu @ maps.phi_uu
    lhs_y = noise.v_inf * np.abs(row_yy).sum() + noise.w_inf * np.abs(row_yu).sum() \
        + row_yy @ y0
    lhs_u = noise.v_inf * np.abs(row_uy).sum() + noise.w_inf * np.abs(row_uu).sum() \
        + row_uy @ y0
    return float(lhs_y), float(lhs_u)


def h_value(eps: float, gamma: float, norm2_Y: float) -> float:
    """Cost-inflation term h(eps, gamma, Y) = eps^2 (2 + gamma ||Y||_2)^2
    + 2 eps ||Y||_2 (2 + gamma ||Y||_2); nondecreasing in each argument."""
    if eps < 0 or gamma < 0 or norm2_Y < 0:
        raise ValueError("h_value arguments must be nonnegative")
    base = 2.0 + gamma * norm2_Y
    return eps * eps * base * base + 2.0 * eps * norm2_Y * base


class TightenedTerms(NamedTuple):
    f_y: float
    f_u: float
    terms_y: tuple[float, float, float]
    terms_u: tuple[float, float, float]


def tightened_lhs_f(maps_hat: ClosedLoopMaps, j: int, tau: float, eps_inf: float,
                    G_hat: ToeplitzOperator, y0_hat: np.ndarray,
                    noise: NoiseSpec, polytope: SafetyPolytope) -> TightenedTerms:
    """Tightened safety constraint value for stacked row j.

    Conservative surrogate of the worst-case constraint under every admissible
    plant within infinity-norm distance eps_inf of the estimate, valid whenever
    ||Phi_uy||_inf <= tau and eps_inf * tau < 1.
    """
    if tau < 0 or eps_inf < 0:
        raise ValueError("tau and eps_inf must be nonnegative")
    denom = 1.0 - eps_inf * tau
    if denom <= 0:
        raise ValueError(f"requires eps_inf * tau < 1 (got {eps_inf * tau:.3f})")
    y0_hat = np.asarray(y0_hat, dtype=float).ravel()
    g_inf = mat_inf_norm(G_hat.dense())
    y0_inf = float(np.max(np.abs(y0_hat))) if y0_hat.size else 0.0
    N = maps_hat.N
    fy, _ = _polytope_row(polytope, N, j, "y")
    fu, _ = _polytope_row(polytope, N, j, "u")
    row_yy = fy @ maps_hat.phi_yy
    row_yu = fy @ maps_hat.phi_yu
    row_uy = fu @ maps_hat.phi_uy
    row_uu = fu @ maps_hat.phi_uu
    k_g = eps_inf * (1.0 + tau * g_inf) / denom
    k_y = eps_inf * (1.0 + tau * y0_inf) / denom
    f1 = noise.v_inf * np.abs(row_yy).sum() / denom
    f2 = noise.w_inf * (np.abs(row_yu).sum() + k_g * np.abs(row_yy).sum())
    f3 = row_yy @ y0_hat + k_y * np.abs(row_yy).sum()
    f4 = noise.v_inf * np.abs(row_uy).sum() / denom
    f5 = noise.w_inf * (np.abs(row_uu).sum() + k_g * np.abs(row_uy).sum())
    f6 = row_uy @ y0_hat + k_y * np.abs(row_uy).sum()
    return TightenedTerms(float(f1 + f2 + f3), float(f4 + f5 + f6),
                          (float(f1), float(f2), float(f3)),
                          (float(f4), float(f5), float(f6)))


def oracle_lhs_phi(maps: ClosedLoopMaps, j: int, zeta: float, eps_inf: float,
                   G_hat: ToeplitzOperator, y0_hat: np.ndarray,
                   noise: NoiseSpec, polytope: SafetyPolytope) -> TightenedTerms:
    """Doubly-tightened constraint value used by the oracle program.

    Requires zeta < 1/2; the denominators are 1 - 2*zeta and the estimate
    mismatch enters through 2*(eps_inf + zeta*||.||_inf) factors.
    """
    if zeta < 0 or eps_inf < 0:
        raise ValueError("zeta and eps_inf must be nonnegative")
    denom = 1.0 - 2.0 * zeta
    if denom <= 0:
        raise ValueError(f"requires zeta < 1/2 (got {zeta:.3f})")
    y0_hat = np.asarray(y0_hat, dtype=float).ravel()
    g_inf = mat_inf_norm(G_hat.dense())
    y0_inf = float(np.max(np.abs(y0_hat))) if y0_hat.size else 0.0
    N = maps.N
    fy, _ = _polytope_row(polytope, N, j, "y")
    fu, _ = _polytope_row(polytope, N, j, "u")
    row_yy = fy @ maps.phi_yy
    row_yu = fy @ maps.phi_yu
    row_uy = fu @ maps.phi_uy
    row_uu = fu @ maps.phi_uu
    k_g = 2.0 * (eps_inf + zeta * g_inf) / denom
    k_y = 2.0 * (eps_inf + zeta * y0_inf) / denom
    p1 = noise.v_inf * np.abs(row_yy).sum() / denom
    p2 = noise.w_inf * (np.abs(row_yu).sum() + k_g * np.abs(row_yy).sum())
    p3 = row_yy @ y0_hat + k_y * np.abs(row_yy).sum()
    p4 = noise.v_inf * np.abs(row_uy).sum() / denom
    p5 = noise.w_inf * (np.abs(row_uu).sum() + k_g * np.abs(row_uy).sum())
    p6 = row_uy @ y0_hat + k_y * np.abs(row_uy).sum()
    return TightenedTerms(float(p1 + p2 + p3), float(p4 + p5 + p6),
                          (float(p1), float(p2), float(p3)),
                          (float(p4), float(p5), float(p6)))
