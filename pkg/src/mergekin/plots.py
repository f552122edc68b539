"""Figure rendering for the report paths (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .kinship import KinshipMatrix


def plot_kinship_matrix(matrix: KinshipMatrix, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix.values, cmap="viridis")
    ax.set_xticks(range(len(matrix.model_ids)))
    ax.set_yticks(range(len(matrix.model_ids)))
    ax.set_xticklabels(matrix.model_ids, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(matrix.model_ids, fontsize=8)
    for i in range(len(matrix.model_ids)):
        for j in range(len(matrix.model_ids)):
            ax.text(j, i, f"{matrix.values[i, j]:.2f}", ha="center",
                    va="center", fontsize=7, color="white")
    ax.set_title(f"Pairwise kinship ({matrix.metric})")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_kinship_vs_gain(rows: list[dict], metric: str, path: Path) -> None:
    """Scatter of kinship against signed and absolute merge gain."""
    kin = np.array([row[f"kinship_{metric}"] for row in rows], dtype=float)
    gain = np.array([row["gain"] for row in rows], dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True)
    for ax, values, label in ((axes[0], gain, "merge gain"),
                              (axes[1], np.abs(gain), "|merge gain|")):
        ax.scatter(kin, values, s=24, alpha=0.8)
        ax.set_xlabel(f"kinship ({metric})")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_atp_trajectory(report_rows: list[dict], path: Path) -> None:
    """Best and per-model ATP against generation index parsed from the
    model-<gen>-<ordinal> naming."""
    points = []
    for row in report_rows:
        name = row["model"]
        if name.startswith("model-"):
            try:
                gen = int(name.split("-")[1])
            except ValueError:
                continue
            points.append((gen, row["avg"]))
        else:
            points.append((0, row["avg"]))
    if not points:
        return
    gens = sorted({g for g, _ in points})
    best_so_far = []
    running = -np.inf
    for g in gens:
        running = max(running, max(v for gg, v in points if gg == g))
        best_so_far.append(running)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter([g for g, _ in points], [v for _, v in points],
               s=20, alpha=0.6, label="models")
    ax.plot(gens, best_so_far, "o-", color="firebrick", label="best so far")
    ax.set_xlabel("generation")
    ax.set_ylabel("average task performance")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
