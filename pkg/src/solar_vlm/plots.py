"""Static plots of result tables and prediction traces."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_results(path: Path, out_dir: Path) -> list:
    """Dispatch on the CSV's columns: sweep, ablation or prediction trace."""
    df = pd.read_csv(path)
    if df.empty:
        raise ValueError(f"results file is empty: {path}")
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = set(df.columns)
    if {"axis", "value", "mse"} <= cols:
        return _plot_sweep(df, out_dir)
    if {"setting", "mse"} <= cols:
        return [_plot_ablation(df, out_dir)]
    if {"window", "site", "step", "prediction", "truth"} <= cols:
        return [_plot_trace(df, out_dir)]
    raise ValueError(f"unrecognized results columns in {path}: {sorted(cols)}")


def _plot_sweep(df, out_dir):
    files = []
    for axis, g in df.groupby("axis"):
        g = g[g.get("status", "ok") == "ok"].sort_values("value")
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        for ax, metric in zip(axes, ("mse", "mae", "r2")):
            ax.plot(g["value"], g[metric], marker="o")
            ax.set_xlabel(axis)
            ax.set_ylabel(metric.upper())
            ax.grid(alpha=0.3)
        fig.tight_layout()
        f = out_dir / f"sweep_{axis}.png"
        fig.savefig(f, dpi=120)
        plt.close(fig)
        files.append(f)
    return files


def _plot_ablation(df, out_dir):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.barh(df["setting"], df["mse"])
    ax.invert_yaxis()
    ax.set_xlabel("test MSE (normalized)")
    fig.tight_layout()
    f = out_dir / "ablation.png"
    fig.savefig(f, dpi=120)
    plt.close(fig)
    return f


def _plot_trace(df, out_dir, site=0):
    # one-step-ahead forecast of each window against the truth at the same time
    g = df[(df["site"] == site) & (df["step"] == 0)].sort_values("window")
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(g["window"], g["truth"], label="truth", color="black", lw=1.2)
    ax.plot(g["window"], g["prediction"], label="prediction", lw=1.0)
    ax.set_xlabel("window")
    ax.set_ylabel("normalized power")
    ax.legend()
    fig.tight_layout()
    f = out_dir / f"prediction_site{site}.png"
    fig.savefig(f, dpi=120)
    plt.close(fig)
    return f
