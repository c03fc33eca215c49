"""Matplotlib figures for training curves, ablation tables and scaling sweeps."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(metrics: list[dict], path) -> None:
    its = [m["iteration"] for m in metrics]

    def series(key):
        return np.array([np.nan if m.get(key) is None else m[key] for m in metrics], dtype=float)

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    ax = axes[0]
    for key, label in (("r_high_mean", "R_high"), ("r_low_mean", "R_low"), ("r_low_full_mean", "R_low (full)")):
        ax.plot(its, series(key), label=label, lw=1)
    ax.set_xlabel("iteration")
    ax.set_title("group rewards")
    ax.legend(fontsize=8)
    ax = axes[1]
    for key in ("loss1", "loss2", "loss"):
        ax.plot(its, series(key), label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_title("loss")
    ax.legend(fontsize=8)
    ax = axes[2]
    ax.plot(its, series("clip_frac"), label="clip fraction", lw=1)
    ax.plot(its, series("kl_mean"), label="KL mean", lw=1)
    ax.set_xlabel("iteration")
    ax.set_title("update diagnostics")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_ablation(rows: list[dict], path, metrics=("train_reward", "eval_mean_r_low")) -> None:
    labels = [r["label"] for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(6, 1.3 * len(rows)), 4))
    for k, key in enumerate(metrics):
        vals = [np.nan if r.get(key) is None else r[key] for r in rows]
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("reward")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_scaling(rows: list[dict], path, metric="eval_mean_r_low") -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, axis in zip(axes, ("data", "iterations")):
        sub = sorted((r for r in rows if r["axis"] == axis), key=lambda r: r["factor"])
        ax.plot([r["factor"] for r in sub], [r[metric] for r in sub], marker="o")
        ax.set_xlabel(f"{axis} factor")
        ax.set_title(f"scaling {axis}")
    axes[0].set_ylabel(metric)
    _save(fig, path)
