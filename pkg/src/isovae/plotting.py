"""Figures written next to the delimited outputs (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_curves(epochs: list[dict], path, target_c: float | None = None) -> None:
    """Per-epoch reconstruction loss and KL, train and dev."""
    fig, (ax_rec, ax_kl) = plt.subplots(1, 2, figsize=(9, 3.5))
    x = [e["epoch"] for e in epochs]
    ax_rec.plot(x, [e["rec_loss"] for e in epochs], marker="o", label="train")
    ax_kl.plot(x, [e["kl"] for e in epochs], marker="o", label="train")
    if epochs and epochs[0].get("dev_rec_loss") is not None:
        ax_rec.plot(x, [e["dev_rec_loss"] for e in epochs], marker="s", label="dev")
        ax_kl.plot(x, [e["dev_kl"] for e in epochs], marker="s", label="dev")
    if target_c is not None:
        ax_kl.axhline(target_c, color="grey", linestyle="--", label="target C")
    ax_rec.set(xlabel="epoch", ylabel="reconstruction loss")
    ax_kl.set(xlabel="epoch", ylabel="KL")
    for ax in (ax_rec, ax_kl):
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def sweep_summary(rows: list[dict], keys: list[str], path, scalars=("rec_loss", "kl", "au")) -> None:
    """One bar panel per scalar, cells on the x axis, std as error bars."""
    fig, axes = plt.subplots(1, len(scalars), figsize=(4 * len(scalars), 3.5), squeeze=False)
    labels = ["\n".join(f"{k}={r[k]}" for k in keys) for r in rows]
    pos = np.arange(len(rows))
    for ax, name in zip(axes[0], scalars):
        ax.bar(pos, [r[f"{name}_mean"] for r in rows], yerr=[r[f"{name}_std"] for r in rows], capsize=3)
        ax.set_xticks(pos, labels, fontsize=7)
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
