"""Config-driven experiment runners.

Four studies are reproduced end to end, each emitting plot-ready CSV series
and a JSON run summary with deterministic seeding:

* ``safe_trajectories`` - nominal and robust synthesis on the benchmark
  second-order plant, followed by closed-loop rollouts and safety checks.
* ``s_curve``           - the tightening-induced suboptimality S as the
  infinity-norm error level sweeps through its feasibility transition.
* ``estimator_compare`` - 90th-percentile error levels of the least-squares
  and likelihood-based estimators across data-noise magnitudes.
* ``subopt_scaling``    - suboptimality gap versus the 2-norm error level for
  several spectral radii, with the theoretical certificate alongside.

Time indexing: the convention here runs t = 0..N-1.  The benchmark studies
quote constraints on output steps 2..12 and input steps 1..11 with the
initial state pinned one step before the first constrained output; those map
to a horizon of N = 12 with output constraints on steps 1..11 and input
constraints on steps 0..10 (offset of one).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from jsonschema import Draft202012Validator

from .behavior import (DataRecord, EstimateBundle, OracleTruth, assess_errors,
                       estimate_ls, estimate_ml, partition_data)
from .conic import SolveStatus
from .iop import (CostWeights, ToeplitzOperator, cost_j, mat_inf_norm,
                  mat_two_norm, responses_from_controller, toeplitz_expand)
from .plant import (NoiseSpec, SafetyPolytope, SignalTrajectory, StateSpaceModel,
                    check_safety, simulate_closed_loop, true_free_response,
                    true_impulse_response)
from .synthesis import (GoldenGamma, GridRandom, SynthesisResult, search_hyperparams,
                        solve_nominal, solve_tightened_oracle, suboptimality_gap_S,
                        theoretical_bound)

__all__ = ["ConfigError", "ExperimentConfig", "RunSummary", "validate_config",
           "load_config", "preset_names", "preset_path", "run",
           "benchmark_model", "collect_record", "perturbed_bundle"]

_PRESET_DIR = Path(__file__).parent / "presets"

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment", "model", "horizon", "noise", "seed"],
    "properties": {
        "experiment": {"enum": ["safe_trajectories", "s_curve",
                                "estimator_compare", "subopt_scaling", "custom"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "A": {"type": "array"},
                "B": {"type": "array"},
                "C": {"type": "array"},
                "x0": {"type": "array", "items": {"type": "number"}},
            },
        },
        "horizon": {"type": "integer", "minimum": 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "T": {"type": "integer", "minimum": 2},
                "T_ini": {"type": "integer", "minimum": 1},
                "sigma": {"type": "number", "minimum": 0},
                "input_scale": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["w_inf", "v_inf"],
            "properties": {
                "w_inf": {"type": "number", "minimum": 0},
                "v_inf": {"type": "number", "minimum": 0},
                "distribution": {"enum": ["uniform", "truncated_gaussian"]},
                "sigma": {"type": ["number", "null"], "exclusiveMinimum": 0},
            },
        },
        "polytope": {
            "type": ["object", "null"],
            "additionalProperties": False,
            "properties": {
                "y_bound": {"type": "number"},
                "u_bound": {"type": "number"},
                "y_steps": {"type": ["array", "null"], "items": {"type": "integer"}},
                "u_steps": {"type": ["array", "null"], "items": {"type": "integer"}},
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "q": {"type": ["number", "array"]},
                "r": {"type": ["number", "array"]},
            },
        },
        "epsilon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["synthetic", "estimated"]},
                "eps": {"type": "number", "minimum": 0},
            },
        },
        "search": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "strategy": {"enum": ["grid_random", "golden_gamma"]},
                "n_points": {"type": "integer", "minimum": 1},
                "iters": {"type": "integer", "minimum": 1},
                "alpha": {
                    "anyOf": [{"type": "number", "exclusiveMinimum": 0},
                              {"enum": ["loose", "certified"]}],
                },
            },
        },
        "rollouts": {"type": "integer", "minimum": 1},
        "s_curve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_inf_grid": {"type": "array",
                                 "items": {"type": "number", "minimum": 0}},
            },
        },
        "estimator_compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sigma_grid": {"type": "array",
                               "items": {"type": "number", "exclusiveMinimum": 0}},
                "draws": {"type": "integer", "minimum": 2},
            },
        },
        "subopt_scaling": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho_grid": {"type": "array",
                             "items": {"type": "number", "exclusiveMinimum": 0}},
                "eps2_grid": {"type": "array",
                              "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
    },
}

_DEFAULTS = {
    "data": {"T": 200, "T_ini": 30, "sigma": 0.0, "input_scale": 1.0},
    "noise": {"distribution": "uniform", "sigma": None},
    "weights": {"q": 1.0, "r": 1.0},
    "epsilon": {"mode": "synthetic", "eps": 0.01},
    "search": {"strategy": "grid_random", "n_points": 100, "iters": 40,
               "alpha": "loose"},
    "rollouts": 50,
    "s_curve": {"eps_inf_grid": [0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12,
                                 0.13, 0.14, 0.15, 0.175, 0.20]},
    "estimator_compare": {"sigma_grid": [0.01, 0.0325, 0.055, 0.0775, 0.1],
                          "draws": 1000},
    "subopt_scaling": {"rho_grid": [0.9, 1.0],
                       "eps2_grid": [1e-3, 3e-3, 1e-2, 3e-2, 1e-1]},
}


class ConfigError(ValueError):
    """Configuration failed schema validation; message names the first bad key."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment configuration (raw dict plus typed accessors)."""

    raw: dict

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def horizon(self) -> int:
        return int(self.raw["horizon"])

    def section(self, name: str) -> dict:
        merged = dict(_DEFAULTS.get(name, {}))
        merged.update(self.raw.get(name, {}) or {})
        return merged

    def model(self) -> StateSpaceModel:
        spec = self.raw["model"]
        x0 = np.asarray(spec.get("x0", [0.0, 0.0]), dtype=float)
        if "rho" in spec:
            return benchmark_model(float(spec["rho"]), x0)
        try:
            return StateSpaceModel(np.asarray(spec["A"], dtype=float),
                                   np.asarray(spec["B"], dtype=float),
                                   np.asarray(spec["C"], dtype=float), x0)
        except KeyError as exc:
            raise ConfigError(f"model: missing key {exc}") from exc

    def noise(self, seed: int) -> NoiseSpec:
        sec = self.section("noise")
        return NoiseSpec(w_inf=float(sec["w_inf"]), v_inf=float(sec["v_inf"]),
                         distribution=sec.get("distribution", "uniform"),
                         sigma=sec.get("sigma"), seed=seed)

    def polytope(self, model: StateSpaceModel) -> Optional[SafetyPolytope]:
        spec = self.raw.get("polytope")
        if spec is None:
            return None
        return SafetyPolytope.box(float(spec["y_bound"]), float(spec["u_bound"]),
                                  p=model.p, m=model.m,
                                  y_steps=spec.get("y_steps"),
                                  u_steps=spec.get("u_steps"))

    def weights(self, model: StateSpaceModel) -> CostWeights:
        sec = self.section("weights")
        N = self.horizon

        def blocks(value, d):
            if isinstance(value, (int, float)):
                return np.tile(float(value) * np.eye(d), (N, 1, 1))
            arr = np.asarray(value, dtype=float)
            if arr.shape != (N,):
                raise ConfigError(f"weights: expected scalar or length-{N} list")
            return np.stack([w * np.eye(d) for w in arr])

        return CostWeights(Q_blocks=blocks(sec["q"], model.p),
                           R_blocks=blocks(sec["r"], model.m),
                           Sigma_v=np.eye(model.p), Sigma_w=np.eye(model.m))


def benchmark_model(rho: float, x0=(6.0, 0.0)) -> StateSpaceModel:
    """Second-order single-input single-output benchmark: a double
    integrator scaled to spectral radius rho, with weak input authority."""
    A = rho * np.array([[1.0, 0.25], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    C = np.array([[1.0, -1.0]])
    return StateSpaceModel(A, B, C, np.asarray(x0, dtype=float))


def validate_config(raw: dict) -> ExperimentConfig:
    """Schema-validate a raw config dict; unknown keys are rejected."""
    validator = Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(x) for x in err.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {err.message}")
    cfg = ExperimentConfig(raw=raw)
    try:
        cfg.model()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return validate_config(raw)


def preset_names() -> list[str]:
    return sorted(p.stem for p in _PRESET_DIR.glob("*.json"))


def preset_path(name: str) -> Path:
    path = _PRESET_DIR / f"{name}.json"
    if not path.exists():
        raise ConfigError(f"unknown preset '{name}' (available: {preset_names()})")
    return path


# ---------------------------------------------------------------------------
# data collection and synthetic perturbations
# ---------------------------------------------------------------------------

def collect_record(model: StateSpaceModel, T: int, T_ini: int, N: int,
                   sigma: float, rng: np.random.Generator,
                   input_scale: float = 1.0) -> DataRecord:
    """Simulate one historical and one recent trajectory and record them.

    The recent rollout is steered so the true state lands exactly on
    model.x0 at its end.  Recorded inputs are the commanded part of the
    applied input (applied minus the Gaussian input noise of std ``sigma``);
    recorded outputs carry additive Gaussian noise of the same std.
    """
    n, m, p = model.n, model.m, model.p
    a_h = rng.normal(0.0, input_scale, (T, m))
    x = np.zeros(n)
    Y_h = np.empty((T, p))
    for t in range(T):
        Y_h[t] = model.C @ x
        x = model.A @ x + model.B @ a_h[t]
    a_r = rng.normal(0.0, input_scale, (T_ini, m))
    reach = np.hstack([np.linalg.matrix_power(model.A, T_ini - 1 - k) @ model.B
                       for k in range(T_ini)])
    drift = reach @ a_r.ravel()
    a_r += (np.linalg.pinv(reach) @ (model.x0 - drift)).reshape(T_ini, m)
    x = np.zeros(n)
    Y_r = np.empty((T_ini, p))
    for t in range(T_ini):
        Y_r[t] = model.C @ x
        x = model.A @ x + model.B @ a_r[t]
    if not np.allclose(x, model.x0, atol=1e-8 * max(1.0, float(np.abs(model.x0).max()))):
        raise RuntimeError("recent-trajectory steering failed to reach x0")

    def noisy(arr, flip_sign):
        if sigma == 0.0:
            return arr
        return arr + (-1.0 if flip_sign else 1.0) * rng.normal(0.0, sigma, arr.shape)

    return DataRecord(
        u_hist=SignalTrajectory.from_matrix(noisy(a_h, True)),
        y_hist=SignalTrajectory.from_matrix(noisy(Y_h, False)),
        u_recent=SignalTrajectory.from_matrix(noisy(a_r, True)),
        y_recent=SignalTrajectory.from_matrix(noisy(Y_r, False)),
        T_ini=T_ini, N=N)


def perturbed_bundle(g_column: np.ndarray, y0: np.ndarray, p: int, m: int,
                     eps2: float, eps_inf: float,
                     rng: np.random.Generator) -> EstimateBundle:
    """Estimate at a prescribed error level: truth plus a random strictly
    causal perturbation scaled so both norm bounds hold with equality on the
    binding one."""
    g_column = np.asarray(g_column, dtype=float).reshape(-1, m)
    y0 = np.asarray(y0, dtype=float).ravel()
    target = max(eps2, eps_inf)
    dcol = rng.normal(size=g_column.shape)
    dcol[:p] = 0.0
    dense = toeplitz_expand(dcol, p, m)
    denom = max(mat_two_norm(dense) / eps2 if eps2 > 0 else 0.0,
                mat_inf_norm(dense) / eps_inf if eps_inf > 0 else 0.0)
    dcol = dcol / denom if denom > 0 else np.zeros_like(dcol)
    dvec = rng.normal(size=y0.size)
    denom_v = max(float(np.linalg.norm(dvec)) / eps2 if eps2 > 0 else 0.0,
                  float(np.max(np.abs(dvec))) / eps_inf if eps_inf > 0 else 0.0)
    dvec = dvec / denom_v if denom_v > 0 else np.zeros_like(dvec)
    if target == 0.0:
        dcol = np.zeros_like(dcol)
        dvec = np.zeros_like(dvec)
    return EstimateBundle(g_column=g_column - dcol, y0_hat=y0 - dvec, p=p, m=m,
                          eps2=float(eps2), eps_inf=float(eps_inf))


# ---------------------------------------------------------------------------
# emission helpers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.17g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> dict:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return {"rows": len(rows), "sha256": digest}


@dataclass(frozen=True)
class RunSummary:
    config: dict
    results: dict
    files: dict
    timings: dict
    solver_stats: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "results": self.results,
                "files": self.files, "timings": self.timings,
                "solver_stats": self.solver_stats}


def _sub_rng(seed: int, *labels: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=labels))


def _alpha_value(search: dict, eps2: float, phi_star_2: float) -> Optional[float]:
    if eps2 <= 0:
        return None
    choice = search.get("alpha", "loose")
    if choice == "loose":
        return 0.999 / eps2
    if choice == "certified":
        eta = eps2 * phi_star_2
        if eta >= 1:
            return 0.999 / eps2
        return min(math.sqrt(2.0) * phi_star_2 / (1.0 - eta), 0.999 / eps2)
    return float(choice)


def _strategy(search: dict, seed: int):
    if search["strategy"] == "grid_random":
        return GridRandom(n_points=int(search["n_points"]), seed=seed)
    return GoldenGamma(iters=int(search["iters"]))


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

def _run_safe_trajectories(cfg: ExperimentConfig, out: Path, threads: int) -> RunSummary:
    t_start = time.perf_counter()
    model = cfg.model()
    N = cfg.horizon
    polytope = cfg.polytope(model)
    weights = cfg.weights(model)
    noise = cfg.noise(seed=cfg.seed)
    data = cfg.section("data")
    search = cfg.section("search")
    epsilon = cfg.section("epsilon")
    rollouts = int(cfg.raw.get("rollouts", _DEFAULTS["rollouts"]))

    g_true = true_impulse_response(model, N)
    y0_true = true_free_response(model, N).values
    G_true = ToeplitzOperator(g_true, p=model.p, m=model.m)

    # data-driven nominal synthesis
    record = collect_record(model, int(data["T"]), int(data["T_ini"]), N,
                            float(data["sigma"]), _sub_rng(cfg.seed, 1),
                            float(data["input_scale"]))
    bundle0 = estimate_ls(partition_data(record), record)
    nominal = solve_nominal(bundle0.g_column, bundle0.y0_hat, polytope, noise,
                            weights, p=model.p, m=model.m)
    model_based = solve_nominal(g_true, y0_true, polytope, noise, weights,
                                p=model.p, m=model.m)
    if not nominal.is_optimal:
        return _bail(cfg, out, t_start, "nominal synthesis", nominal.status)
    j_nom_true = cost_j(responses_from_controller(nominal.controller, G_true),
                        y0_true, weights)
    j_model = model_based.j_inner
    nominal_gap = (j_nom_true ** 2 - j_model ** 2) / (j_model ** 2)

    # robust synthesis from a noisy estimate at the configured error level
    eps = float(epsilon["eps"])
    if epsilon["mode"] == "synthetic":
        bundle = perturbed_bundle(g_true, y0_true, model.p, model.m, eps, eps,
                                  _sub_rng(cfg.seed, 2))
    else:
        sigma = float(data["sigma"])
        rec = collect_record(model, int(data["T"]), int(data["T_ini"]), N,
                             sigma, _sub_rng(cfg.seed, 2), float(data["input_scale"]))
        est = estimate_ls(partition_data(rec), rec)
        bundle = assess_errors(est, OracleTruth(g_true, y0_true))
    alpha = _alpha_value(search, float(bundle.eps2),
                         mat_two_norm(model_based.maps_hat.phi_uy))
    robust = search_hyperparams(bundle, polytope, noise,
                                _strategy(search, cfg.seed), weights=weights,
                                alpha=alpha, threads=threads)
    results = {
        "j_nominal": nominal.j_inner,
        "j_nominal_on_true_plant": j_nom_true,
        "j_model_based": j_model,
        "nominal_gap": nominal_gap,
        "robust_status": robust.status.value,
    }
    rows = []
    all_safe = {}
    controllers = [("nominal", nominal.controller)]
    if robust.is_optimal:
        j_rob_true = cost_j(responses_from_controller(robust.controller, G_true),
                            y0_true, weights)
        results.update({
            "j_robust_certificate": robust.j_robust,
            "j_robust_on_true_plant": j_rob_true,
            "robust_gap": (j_rob_true ** 2 - j_model ** 2) / (j_model ** 2),
            "hyper": {"gamma": robust.hyper.gamma, "tau": robust.hyper.tau,
                      "alpha": robust.hyper.alpha},
            "search_evaluations": robust.evaluations,
        })
        controllers.append(("robust", robust.controller))
    for label, K in controllers:
        trajs = simulate_closed_loop(model, K, noise, realizations=rollouts)
        safe = True
        for run_id, (y, u) in enumerate(trajs):
            if polytope is not None:
                safe &= check_safety(y, u, polytope).all_safe
            ym, um = y.as_matrix(), u.as_matrix()
            for t in range(N):
                row = [run_id, label, t]
                row += [float(v) for v in ym[t]] + [float(v) for v in um[t]]
                rows.append(row)
        all_safe[label] = bool(safe)
    results["all_safe"] = all_safe
    y_cols = ["y"] if model.p == 1 else [f"y_{i}" for i in range(model.p)]
    u_cols = ["u"] if model.m == 1 else [f"u_{i}" for i in range(model.m)]
    files = {"trajectories.csv": _write_csv(out / "trajectories.csv",
                                            ["run_id", "controller", "t"] + y_cols + u_cols,
                                            rows)}
    timings = {"wall_s": time.perf_counter() - t_start}
    status = "ok" if robust.is_optimal else robust.status.value
    results["status"] = status
    return RunSummary(cfg.raw, results, files, timings,
                      {"search_evaluations": robust.evaluations})


def _run_s_curve(cfg: ExperimentConfig, out: Path, threads: int) -> RunSummary:
    t_start = time.perf_counter()
    model = cfg.model()
    N = cfg.horizon
    polytope = cfg.polytope(model)
    weights = cfg.weights(model)
    noise = cfg.noise(seed=cfg.seed)
    data = cfg.section("data")
    grid = cfg.section("s_curve")["eps_inf_grid"]

    g_true = true_impulse_response(model, N)
    y0_true = true_free_response(model, N).values
    record = collect_record(model, int(data["T"]), int(data["T_ini"]), N,
                            float(data["sigma"]), _sub_rng(cfg.seed, 1),
                            float(data["input_scale"]))
    bundle = estimate_ls(partition_data(record), record)
    bundle = assess_errors(bundle, OracleTruth(g_true, y0_true))
    points, nominal = suboptimality_gap_S(g_true, y0_true, bundle, polytope,
                                          noise, grid, weights)
    rows = [[pt.eps_inf, pt.S, int(pt.feasible)] for pt in points]
    files = {"s_curve.csv": _write_csv(out / "s_curve.csv",
                                       ["eps_inf", "S_value_or_inf", "feasible"], rows)}
    finite = [pt for pt in points if pt.feasible]
    infeasible = [pt for pt in points if not pt.feasible]
    results = {
        "status": "ok",
        "j_star": nominal.j_inner,
        "phi_star_norm2": mat_two_norm(nominal.maps_hat.phi_uy),
        "phi_star_norm_inf": mat_inf_norm(nominal.maps_hat.phi_uy),
        "last_feasible_eps_inf": max((pt.eps_inf for pt in finite), default=None),
        "first_infeasible_eps_inf": min((pt.eps_inf for pt in infeasible), default=None),
    }
    return RunSummary(cfg.raw, results, files,
                      {"wall_s": time.perf_counter() - t_start},
                      {"oracle_solves": len(points)})


def _estimator_draw(args):
    (seed, labels, model_args, T, T_ini, N, sigma, input_scale) = args
    model = StateSpaceModel(*model_args)
    rng = _sub_rng(seed, *labels)
    record = collect_record(model, T, T_ini, N, sigma, rng, input_scale)
    part = partition_data(record)
    truth = OracleTruth(true_impulse_response(model, N),
                        true_free_response(model, N).values)
    ls = assess_errors(estimate_ls(part, record), truth)
    ml = assess_errors(estimate_ml(part, record, sigma), truth)
    return (ls.eps2, ls.eps_inf, ml.eps2, ml.eps_inf)


def _run_estimator_compare(cfg: ExperimentConfig, out: Path, threads: int) -> RunSummary:
    t_start = time.perf_counter()
    model = cfg.model()
    N = cfg.horizon
    data = cfg.section("data")
    sec = cfg.section("estimator_compare")
    sigma_grid = [float(s) for s in sec["sigma_grid"]]
    draws = int(sec["draws"])
    model_args = (model.A, model.B, model.C, model.x0)
    rows = []
    for si, sigma in enumerate(sigma_grid):
        tasks = [(cfg.seed, (10 + si, d), model_args, int(data["T"]),
                  int(data["T_ini"]), N, sigma, float(data["input_scale"]))
                 for d in range(draws)]
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                samples = list(pool.map(_estimator_draw, tasks, chunksize=8))
        else:
            samples = [_estimator_draw(t) for t in tasks]
        arr = np.asarray(samples)
        p90 = np.percentile(arr, 90.0, axis=0)
        rows.append([sigma, "ls", float(p90[0]), float(p90[1])])
        rows.append([sigma, "ml", float(p90[2]), float(p90[3])])
    files = {"estimator_errors.csv": _write_csv(
        out / "estimator_errors.csv",
        ["sigma", "estimator", "eps2_p90", "eps_inf_p90"], rows)}
    ml_never_worse = all(
        rows[2 * i + 1][2] <= rows[2 * i][2] and rows[2 * i + 1][3] <= rows[2 * i][3]
        for i in range(len(sigma_grid)))
    results = {"status": "ok", "draws": draws, "ml_never_worse_p90": ml_never_worse}
    return RunSummary(cfg.raw, results, files,
                      {"wall_s": time.perf_counter() - t_start},
                      {"estimations": 2 * draws * len(sigma_grid)})


def _subopt_cell(args):
    (seed, rho, eps2, x0, N, q, r, noise_args, search, iters) = args
    model = benchmark_model(rho, x0)
    noise = NoiseSpec(*noise_args)
    weights = CostWeights(Q_blocks=np.stack([w * np.eye(model.p) for w in q]),
                          R_blocks=np.stack([w * np.eye(model.m) for w in r]),
                          Sigma_v=np.eye(model.p), Sigma_w=np.eye(model.m))
    g_true = true_impulse_response(model, N)
    y0_true = true_free_response(model, N).values
    G_true = ToeplitzOperator(g_true, p=model.p, m=model.m)
    nominal = solve_nominal(g_true, y0_true, None, noise, weights,
                            p=model.p, m=model.m)
    j_star = nominal.j_inner
    phi2 = mat_two_norm(nominal.maps_hat.phi_uy)
    phi_inf = mat_inf_norm(nominal.maps_hat.phi_uy)
    # one shared perturbation direction per run seed: cells stay comparable
    bundle = perturbed_bundle(g_true, y0_true, model.p, model.m, eps2, eps2,
                              _sub_rng(seed, 3))
    alpha = _alpha_value(search, eps2, phi2)
    res = search_hyperparams(bundle, None, noise, GoldenGamma(iters=iters),
                             weights=weights, alpha=alpha)
    if not res.is_optimal:
        return [rho, eps2, math.inf, math.inf, math.inf, res.status.value]
    j_real = cost_j(responses_from_controller(res.controller, G_true), y0_true,
                    weights)
    gap_cert = (res.j_robust ** 2 - j_star ** 2) / (j_star ** 2)
    gap_real = (j_real ** 2 - j_star ** 2) / (j_star ** 2)
    oracle = solve_tightened_oracle(g_true, y0_true, bundle, None, noise,
                                    (phi2, phi_inf), weights)
    if oracle.status is SolveStatus.OPTIMAL:
        j_c = cost_j(responses_from_controller(oracle.controller, G_true),
                     y0_true, weights)
        S = max((j_c ** 2 - j_star ** 2) / (j_star ** 2), 0.0)
        terms = theoretical_bound((phi2, phi_inf), eps2, float(bundle.eps_inf),
                                  alpha, bundle.g_column, bundle.y0_hat,
                                  (mat_two_norm(G_true.dense()),
                                   float(np.linalg.norm(y0_true))),
                                  mat_two_norm(oracle.maps_c.phi_uy), S,
                                  p=model.p, m=model.m)
        bound = terms.bound_value if terms.certified else math.inf
    else:
        bound = math.inf
    return [rho, eps2, gap_cert, gap_real, bound, "optimal"]


def _run_subopt_scaling(cfg: ExperimentConfig, out: Path, threads: int) -> RunSummary:
    t_start = time.perf_counter()
    model = cfg.model()
    N = cfg.horizon
    sec = cfg.section("subopt_scaling")
    search = cfg.section("search")
    weights_sec = cfg.section("weights")
    noise_sec = cfg.section("noise")
    q = weights_sec["q"] if isinstance(weights_sec["q"], list) else [weights_sec["q"]] * N
    r = weights_sec["r"] if isinstance(weights_sec["r"], list) else [weights_sec["r"]] * N
    noise_args = (float(noise_sec["w_inf"]), float(noise_sec["v_inf"]),
                  noise_sec.get("distribution", "uniform"), noise_sec.get("sigma"),
                  cfg.seed)
    tasks = [(cfg.seed, float(rho), float(eps2), tuple(cfg.raw["model"].get("x0", (6.0, 0.0))),
              N, q, r, noise_args, search, int(search["iters"]))
             for rho in sec["rho_grid"] for eps2 in sec["eps2_grid"]]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_subopt_cell, tasks))
    else:
        rows = [_subopt_cell(t) for t in tasks]
    files = {"subopt.csv": _write_csv(
        out / "subopt.csv",
        ["rho", "eps2", "gap", "gap_realized", "bound_value", "status"], rows)}
    results = {"status": "ok",
               "cells": len(rows),
               "all_optimal": all(r[-1] == "optimal" for r in rows)}
    return RunSummary(cfg.raw, results, files,
                      {"wall_s": time.perf_counter() - t_start},
                      {"cells": len(rows)})


def _bail(cfg: ExperimentConfig, out: Path, t_start: float, stage: str,
          status: SolveStatus) -> RunSummary:
    return RunSummary(cfg.raw, {"status": status.value, "failed_stage": stage},
                      {}, {"wall_s": time.perf_counter() - t_start}, {})


_RUNNERS = {
    "safe_trajectories": _run_safe_trajectories,
    "custom": _run_safe_trajectories,
    "s_curve": _run_s_curve,
    "estimator_compare": _run_estimator_compare,
    "subopt_scaling": _run_subopt_scaling,
}


def run(cfg: ExperimentConfig, output_dir=None, threads: int = 1,
        seed: Optional[int] = None) -> RunSummary:
    """Execute the configured experiment, emit CSVs plus summary.json.

    Identical config and seed produce byte-identical CSVs regardless of the
    thread count; grid points that fail to solve are recorded as rows, never
    aborting the sweep.
    """
    raw = dict(cfg.raw)
    if seed is not None:
        raw["seed"] = int(seed)
    cfg = ExperimentConfig(raw=raw)
    out = Path(output_dir or cfg.raw.get("output_dir", "runs/" + cfg.experiment))
    out.mkdir(parents=True, exist_ok=True)
    summary = _RUNNERS[cfg.experiment](cfg, out, max(1, int(threads)))
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, default=_json_default)
        fh.write("\n")
    return summary


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(f"not JSON serializable: {type(x)}")
