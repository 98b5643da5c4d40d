#!/usr/bin/env python3
"""Render the CSVs emitted by `synth run` with matplotlib.

Usage: plot_results.py RUN_DIR [RUN_DIR ...]

Picks a plot per recognized CSV name and writes PNGs next to the data.
Optional helper; not part of the package contract.
"""

import csv
import math
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def plot_trajectories(path, out):
    rows = read_csv(path)
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(7, 6))
    colors = {"nominal": "tab:green", "robust": "tab:blue"}
    by_run = {}
    for r in rows:
        key = (r["controller"], int(r["run_id"]))
        by_run.setdefault(key, []).append((int(r["t"]), float(r["y"]), float(r["u"])))
    for (controller, _), pts in by_run.items():
        pts.sort()
        ts = [p[0] for p in pts]
        axes[0].plot(ts, [p[1] for p in pts], color=colors.get(controller, "gray"),
                     alpha=0.25, lw=0.8)
        axes[1].plot(ts, [p[2] for p in pts], color=colors.get(controller, "gray"),
                     alpha=0.25, lw=0.8)
    axes[0].set_ylabel("y(t)")
    axes[1].set_ylabel("u(t)")
    axes[1].set_xlabel("t")
    for controller, color in colors.items():
        axes[0].plot([], [], color=color, label=controller)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_s_curve(path, out):
    rows = read_csv(path)
    xs = [float(r["eps_inf"]) for r in rows]
    ys = [float(r["S_value_or_inf"]) for r in rows]
    finite = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
    infeasible = [x for x, y in zip(xs, ys) if not math.isfinite(y)]
    fig, ax = plt.subplots(figsize=(6, 4))
    if finite:
        ax.plot(*zip(*finite), "o-", label="S(eps_inf)")
    for x in infeasible:
        ax.axvline(x, color="tab:red", alpha=0.3)
    ax.set_xlabel("eps_inf")
    ax.set_ylabel("S")
    ax.set_title("tightening suboptimality (red: infeasible)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_estimators(path, out):
    rows = read_csv(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for est, style in (("ls", "o--"), ("ml", "s-")):
        pts = [(float(r["sigma"]), float(r["eps2_p90"]), float(r["eps_inf_p90"]))
               for r in rows if r["estimator"] == est]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], style,
                label=f"{est} eps2 p90")
        ax.plot([p[0] for p in pts], [p[2] for p in pts], style, alpha=0.5,
                label=f"{est} eps_inf p90")
    ax.set_xlabel("data noise std")
    ax.set_ylabel("90th-percentile error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


def plot_subopt(path, out):
    rows = read_csv(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    rhos = sorted({float(r["rho"]) for r in rows})
    for rho in rhos:
        pts = [(float(r["eps2"]), float(r["gap"])) for r in rows
               if float(r["rho"]) == rho and math.isfinite(float(r["gap"]))]
        pts.sort()
        ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-",
                  label=f"rho={rho}")
    ax.set_xlabel("eps2")
    ax.set_ylabel("certified suboptimality gap")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=150)


PLOTTERS = {
    "trajectories.csv": plot_trajectories,
    "s_curve.csv": plot_s_curve,
    "estimator_errors.csv": plot_estimators,
    "subopt.csv": plot_subopt,
}


def main(argv):
    if len(argv) < 2:
        print(__doc__)
        return 1
    for run_dir in argv[1:]:
        run_dir = Path(run_dir)
        for name, plotter in PLOTTERS.items():
            path = run_dir / name
            if path.exists():
                out = path.with_suffix(".png")
                plotter(path, out)
                print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
