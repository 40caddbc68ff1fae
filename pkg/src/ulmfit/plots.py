"""Figure rendering for the CLI report paths.

Each report command writes its delimited output first and then renders a
PNG next to it from that same file, so the figures always reflect exactly
what the CSV says.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .ablation import read_curve_csv, read_grid_csv  # noqa: E402


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def render_schedule(csv_path, out_path=None) -> Path:
    """Learning rate against iteration from a (t, eta) dump."""
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1)
    out_path = Path(out_path) if out_path else figure_path(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(rows[:, 0], rows[:, 1], lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    ax.set_title("learning-rate schedule")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_ablation(csv_path, out_path=None) -> Path:
    """Median validation error per variant, seed scatter overlaid."""
    rows = read_grid_csv(csv_path)
    out_path = Path(out_path) if out_path else figure_path(csv_path)
    variants: list[str] = []
    for variant, _, _ in rows:
        if variant not in variants:
            variants.append(variant)
    by_variant = {v: [err for vv, _, err in rows if vv == v] for v in variants}
    medians = [float(np.median(by_variant[v])) for v in variants]
    fig, ax = plt.subplots(figsize=(7, 3.6))
    xs = np.arange(len(variants))
    ax.bar(xs, medians, color="#4878a8", alpha=0.85)
    for i, v in enumerate(variants):
        errs = by_variant[v]
        ax.plot([i] * len(errs), errs, "k.", ms=4, alpha=0.6)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("validation error")
    ax.set_title("classifier fine-tuning variants (median over seeds)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_lowshot(csv_path, out_path=None) -> Path:
    """Median validation error against label budget, one line per mode."""
    rows = read_curve_csv(csv_path)
    out_path = Path(out_path) if out_path else figure_path(csv_path)
    modes: list[str] = []
    for _, mode, _, _ in rows:
        if mode not in modes:
            modes.append(mode)
    budgets = sorted({b for b, _, _, _ in rows})
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for mode in modes:
        medians = [float(np.median([e for b, m, _, e in rows
                                    if b == budget and m == mode]))
                   for budget in budgets]
        ax.plot(budgets, medians, "o-", label=mode)
    ax.set_xscale("log")
    ax.set_xlabel("labeled training examples")
    ax.set_ylabel("validation error (median)")
    ax.set_title("low-shot learning")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
