"""Ground-truth LTI simulation, bounded noise, closed-loop rollout and safety checks.

The plant is a discrete-time linear system

    x(t+1) = A x(t) + B u(t),      y(t) = C x(t) + v(t),

driven through a causal linear feedback u(t) = sum_k K[t,k] y(k) + w(t).
All trajectories use the stacked convention: a length-T signal of d-vectors
is a single (d*T,) array with block t occupying entries [t*d, (t+1)*d).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NonCausalControllerError",
    "StateSpaceModel",
    "NoiseSpec",
    "SafetyPolytope",
    "SignalTrajectory",
    "SafetyReport",
    "simulate_open_loop",
    "true_impulse_response",
    "true_free_response",
    "simulate_closed_loop",
    "check_safety",
]


class DimensionError(ValueError):
    """Inconsistent array dimensions; carries the offending dimension name."""

    def __init__(self, name: str, expected, got):
        self.name = name
        self.expected = expected
        self.got = got
        super().__init__(f"dimension '{name}': expected {expected}, got {got}")


class NonCausalControllerError(ValueError):
    """Controller matrix has nonzero entries above the block diagonal."""


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SignalTrajectory:
    """A finite-horizon trajectory stored as a stacked vector.

    Parameters
    ----------
    values : (d*T,) array
        Stacked samples, block t at [t*d, (t+1)*d).
    dim : int
        Sample dimension d.
    """

    values: np.ndarray
    dim: int

    def __post_init__(self):
        values = _as_float_array(self.values, "values").ravel()
        object.__setattr__(self, "values", values)
        if self.dim < 1:
            raise DimensionError("dim", ">= 1", self.dim)
        if values.size % self.dim != 0:
            raise DimensionError("values length", f"multiple of {self.dim}", values.size)

    @classmethod
    def from_matrix(cls, samples) -> "SignalTrajectory":
        """Build from a (T, d) array with one sample per row."""
        samples = np.atleast_2d(_as_float_array(samples, "samples"))
        return cls(values=samples.ravel(), dim=samples.shape[1])

    @classmethod
    def zeros(cls, steps: int, dim: int) -> "SignalTrajectory":
        return cls(values=np.zeros(steps * dim), dim=dim)

    @property
    def steps(self) -> int:
        return self.values.size // self.dim

    def as_matrix(self) -> np.ndarray:
        """Return a (T, d) view with one sample per row."""
        return self.values.reshape(self.steps, self.dim)

    def block(self, t: int) -> np.ndarray:
        return self.values[t * self.dim:(t + 1) * self.dim]


@dataclass(frozen=True)
class StateSpaceModel:
    """Ground-truth matrices (A, B, C) and initial state, used only for
    simulation and oracle checks."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        A = _as_float_array(self.A, "A")
        B = _as_float_array(self.B, "B")
        C = _as_float_array(self.C, "C")
        x0 = _as_float_array(self.x0, "x0").ravel()
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError("A", "square matrix", A.shape)
        n = A.shape[0]
        B = B.reshape(n, -1) if B.ndim == 1 else B
        if B.shape[0] != n:
            raise DimensionError("B rows", n, B.shape[0])
        C = C.reshape(-1, n) if C.ndim == 1 else C
        if C.shape[1] != n:
            raise DimensionError("C cols", n, C.shape[1])
        if x0.size != n:
            raise DimensionError("x0", n, x0.size)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "x0", x0)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def with_x0(self, x0) -> "StateSpaceModel":
        return replace(self, x0=np.asarray(x0, dtype=float))


@dataclass(frozen=True)
class NoiseSpec:
    """Hard-bounded noise on the input (w) and output (v) channels.

    ``distribution`` selects how samples are drawn inside the bounds:
    ``"uniform"`` is uniform on [-bound, bound] per coordinate;
    ``"truncated_gaussian"`` draws N(0, sigma^2) and rejects samples
    outside the bound.  Every sample satisfies the infinity-norm bound
    exactly.  Draws are reproducible from ``seed``.
    """

    w_inf: float
    v_inf: float
    distribution: str = "uniform"
    sigma: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.w_inf < 0 or self.v_inf < 0:
            raise ValueError("noise bounds must be nonnegative")
        if self.distribution not in ("uniform", "truncated_gaussian"):
            raise ValueError(f"unknown distribution '{self.distribution}'")
        if self.distribution == "truncated_gaussian" and not self.sigma:
            raise ValueError("truncated_gaussian requires sigma > 0")

    def _draw(self, rng: np.random.Generator, bound: float, size: int) -> np.ndarray:
        if bound == 0.0:
            return np.zeros(size)
        if self.distribution == "uniform":
            return rng.uniform(-bound, bound, size)
        out = rng.normal(0.0, self.sigma, size)
        bad = np.abs(out) > bound
        while np.any(bad):
            out[bad] = rng.normal(0.0, self.sigma, int(bad.sum()))
            bad = np.abs(out) > bound
        return out

    def sample(self, horizon: int, m: int, p: int, realizations: int = 1
               ) -> tuple[np.ndarray, np.ndarray]:
        """Draw (W, V) with shapes (realizations, m*horizon), (realizations, p*horizon).

        Realization k uses a sub-seed derived deterministically from ``seed``,
        so per-realization results do not depend on evaluation order.
        """
        children = np.random.SeedSequence(self.seed).spawn(realizations)
        W = np.empty((realizations, m * horizon))
        V = np.empty((realizations, p * horizon))
        for k, child in enumerate(children):
            rng = np.random.default_rng(child)
            W[k] = self._draw(rng, self.w_inf, m * horizon)
            V[k] = self._draw(rng, self.v_inf, p * horizon)
        return W, V


@dataclass(frozen=True)
class SafetyPolytope:
    """Per-time-step polytope F_y y(t) <= b_y, F_u u(t) <= b_u.

    ``y_steps`` / ``u_steps`` optionally restrict which time steps the output
    and input constraints apply to (``None`` means every step).
    """

    F_y: np.ndarray
    b_y: np.ndarray
    F_u: np.ndarray
    b_u: np.ndarray
    y_steps: Optional[tuple[int, ...]] = None
    u_steps: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        F_y = np.atleast_2d(_as_float_array(self.F_y, "F_y"))
        F_u = np.atleast_2d(_as_float_array(self.F_u, "F_u"))
        b_y = _as_float_array(self.b_y, "b_y").ravel()
        b_u = _as_float_array(self.b_u, "b_u").ravel()
        if F_y.shape[0] != b_y.size:
            raise DimensionError("b_y", F_y.shape[0], b_y.size)
        if F_u.shape[0] != b_u.size:
            raise DimensionError("b_u", F_u.shape[0], b_u.size)
        object.__setattr__(self, "F_y", F_y)
        object.__setattr__(self, "F_u", F_u)
        object.__setattr__(self, "b_y", b_y)
        object.__setattr__(self, "b_u", b_u)
        for name in ("y_steps", "u_steps"):
            steps = getattr(self, name)
            if steps is not None:
                object.__setattr__(self, name, tuple(int(t) for t in steps))

    @classmethod
    def box(cls, y_bound: float, u_bound: float, p: int = 1, m: int = 1,
            y_steps: Optional[Sequence[int]] = None,
            u_steps: Optional[Sequence[int]] = None) -> "SafetyPolytope":
        """Symmetric box |y_i| <= y_bound, |u_i| <= u_bound."""
        F_y = np.vstack([np.eye(p), -np.eye(p)])
        F_u = np.vstack([np.eye(m), -np.eye(m)])
        return cls(F_y=F_y, b_y=np.full(2 * p, float(y_bound)),
                   F_u=F_u, b_u=np.full(2 * m, float(u_bound)),
                   y_steps=None if y_steps is None else tuple(y_steps),
                   u_steps=None if u_steps is None else tuple(u_steps))

    @property
    def p(self) -> int:
        return self.F_y.shape[1]

    @property
    def m(self) -> int:
        return self.F_u.shape[1]

    def origin_feasible(self) -> bool:
        """True if (y, u) = (0, 0) lies inside the polytope."""
        return bool(np.all(self.b_y >= 0) and np.all(self.b_u >= 0))

    def active_y_steps(self, horizon: int) -> tuple[int, ...]:
        steps = range(horizon) if self.y_steps is None else self.y_steps
        return tuple(t for t in steps if 0 <= t < horizon)

    def active_u_steps(self, horizon: int) -> tuple[int, ...]:
        steps = range(horizon) if self.u_steps is None else self.u_steps
        return tuple(t for t in steps if 0 <= t < horizon)


@dataclass(frozen=True)
class SafetyReport:
    """Slack of every active polytope row; all_safe iff min slack >= 0."""

    min_slack: float
    all_safe: bool
    y_slacks: np.ndarray  # (len(y_steps), s_y)
    u_slacks: np.ndarray  # (len(u_steps), s_u)
    violations: tuple[tuple[str, int, int, float], ...] = field(default_factory=tuple)


def simulate_open_loop(model: StateSpaceModel, inputs: SignalTrajectory,
                       noise: Optional[NoiseSpec] = None
                       ) -> tuple[SignalTrajectory, SignalTrajectory]:
    """Roll the plant forward from model.x0 under the given inputs.

    Input noise w(t) is added to the applied input and output noise v(t) to
    the measurement, both drawn from ``noise`` (no noise when ``None``).
    Returns (outputs, states).
    """
    if inputs.dim != model.m:
        raise DimensionError("inputs.dim", model.m, inputs.dim)
    N = inputs.steps
    if noise is None:
        w = np.zeros(N * model.m)
        v = np.zeros(N * model.p)
    else:
        W, V = noise.sample(N, model.m, model.p, realizations=1)
        w, v = W[0], V[0]
    u = inputs.values + w
    y = np.empty(N * model.p)
    xs = np.empty(N * model.n)
    x = model.x0.copy()
    for t in range(N):
        xs[t * model.n:(t + 1) * model.n] = x
        y[t * model.p:(t + 1) * model.p] = model.C @ x + v[t * model.p:(t + 1) * model.p]
        x = model.A @ x + model.B @ u[t * model.m:(t + 1) * model.m]
    return (SignalTrajectory(y, model.p), SignalTrajectory(xs, model.n))


def true_impulse_response(model: StateSpaceModel, N: int) -> np.ndarray:
    """First block-column of the plant's impulse-response Toeplitz operator.

    The plant is strictly causal (one-step input delay), so block 0 is the
    zero p x m matrix and block k is C A^(k-1) B for k >= 1.  Shape (p*N, m).
    """
    if N < 1:
        raise ValueError("horizon must be >= 1")
    col = np.zeros((model.p * N, model.m))
    Ak_B = model.B.copy()
    for k in range(1, N):
        col[k * model.p:(k + 1) * model.p] = model.C @ Ak_B
        Ak_B = model.A @ Ak_B
    return col


def true_free_response(model: StateSpaceModel, N: int) -> SignalTrajectory:
    """Zero-input output trajectory from model.x0: entry t is C A^t x0."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    out = np.empty(N * model.p)
    x = model.x0.copy()
    for t in range(N):
        out[t * model.p:(t + 1) * model.p] = model.C @ x
        x = model.A @ x
    return SignalTrajectory(out, model.p)


def _check_causal(K: np.ndarray, m: int, p: int, tol: float = 1e-12) -> int:
    """Validate block lower-triangular structure of K; return the horizon."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] % m or K.shape[1] % p:
        raise DimensionError("K", f"(m*N, p*N) with m={m}, p={p}", K.shape)
    N = K.shape[0] // m
    if K.shape[1] // p != N:
        raise DimensionError("K horizon", N, K.shape[1] // p)
    for i in range(N):
        upper = K[i * m:(i + 1) * m, (i + 1) * p:]
        if upper.size and np.max(np.abs(upper)) > tol:
            raise NonCausalControllerError(
                f"K has nonzero entries above block row {i} (max {np.max(np.abs(upper)):.2e})")
    return N


def simulate_closed_loop(model: StateSpaceModel, K: np.ndarray, noise: NoiseSpec,
                         realizations: int = 1
                         ) -> list[tuple[SignalTrajectory, SignalTrajectory]]:
    """Simulate u = K y + w on the true plant for several noise draws.

    K is the (m*N) x (p*N) block lower-triangular feedback gain.  Each
    realization draws (w, v) from ``noise`` with a per-realization sub-seed
    and applies the interconnection sequentially in time.
    """
    m, p, n = model.m, model.p, model.n
    N = _check_causal(np.asarray(K, dtype=float), m, p)
    K = np.asarray(K, dtype=float)
    W, V = noise.sample(N, m, p, realizations)
    out = []
    for k in range(realizations):
        w, v = W[k], V[k]
        y = np.zeros(N * p)
        u = np.zeros(N * m)
        x = model.x0.copy()
        for t in range(N):
            y[t * p:(t + 1) * p] = model.C @ x + v[t * p:(t + 1) * p]
            u[t * m:(t + 1) * m] = K[t * m:(t + 1) * m, :(t + 1) * p] @ y[:(t + 1) * p] \
                + w[t * m:(t + 1) * m]
            x = model.A @ x + model.B @ u[t * m:(t + 1) * m]
        resid = np.max(np.abs(u - (K @ y + w)))
        if resid > 1e-10:
            raise RuntimeError(f"closed-loop interconnection residual {resid:.2e}")
        out.append((SignalTrajectory(y, p), SignalTrajectory(u, m)))
    return out


def check_safety(y: SignalTrajectory, u: SignalTrajectory,
                 gamma_set: SafetyPolytope) -> SafetyReport:
    """Evaluate polytope slack b - F*signal at every active time step."""
    if y.dim != gamma_set.p:
        raise DimensionError("y.dim", gamma_set.p, y.dim)
    if u.dim != gamma_set.m:
        raise DimensionError("u.dim", gamma_set.m, u.dim)
    y_steps = gamma_set.active_y_steps(y.steps)
    u_steps = gamma_set.active_u_steps(u.steps)
    y_slacks = np.array([gamma_set.b_y - gamma_set.F_y @ y.block(t) for t in y_steps]
                        ).reshape(len(y_steps), -1)
    u_slacks = np.array([gamma_set.b_u - gamma_set.F_u @ u.block(t) for t in u_steps]
                        ).reshape(len(u_steps), -1)
    violations = []
    for idx, t in enumerate(y_steps):
        for j in np.flatnonzero(y_slacks[idx] < 0):
            violations.append(("y", t, int(j), float(y_slacks[idx, j])))
    for idx, t in enumerate(u_steps):
        for j in np.flatnonzero(u_slacks[idx] < 0):
            violations.append(("u", t, int(j), float(u_slacks[idx, j])))
    candidates = [s.min() for s in (y_slacks, u_slacks) if s.size]
    min_slack = float(min(candidates)) if candidates else float("inf")
    return SafetyReport(min_slack=min_slack, all_safe=min_slack >= 0,
                        y_slacks=y_slacks, u_slacks=u_slacks,
                        violations=tuple(violations))
