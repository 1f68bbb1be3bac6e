"""Report figures written straight to image files (Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def read_csv_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def loss_curves(loss_csv, path, rollout_csv=None, title: str = "training losses") -> Path:
    cols = read_csv_columns(loss_csv)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for name in ("total", "l_rec", "l_isda", "l_diff"):
        if name in cols and np.any(cols[name]):
            ax.plot(cols["step"], cols[name], label=name, lw=1)
    if rollout_csv and Path(rollout_csv).exists():
        roll = read_csv_columns(rollout_csv)
        if roll:
            ax.plot(roll["step"], roll["rollout_l_diff"], "o-", ms=3, label="rollout L_diff")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _save(fig, path)


def stage_psnr(stage_means: list[float], baseline: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ks = np.arange(1, len(stage_means) + 1)
    ax.plot(ks, stage_means, "o-", label="restored")
    ax.axhline(baseline, color="gray", ls="--", label="degraded input")
    ax.set_xticks(ks)
    ax.set_xlabel("stage")
    ax.set_ylabel("mean PSNR (dB)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def ablation_bars(rows: list[dict], path) -> Path:
    names = [r["variant"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 3.4))
    ax.bar(names, [r["psnr"] for r in rows], color=["C1" if n == "full" else "C0" for n in names])
    lo = min(r["psnr"] for r in rows)
    ax.set_ylim(lo - 1.0, max(r["psnr"] for r in rows) + 0.5)
    ax.set_ylabel("mean PSNR (dB)")
    ax.tick_params(axis="x", rotation=35, labelsize=8)
    return _save(fig, path)


def stage_trace(y: np.ndarray, trace: dict, path, clean: np.ndarray | None = None) -> Path:
    """Grid of x_hat, x_tilde and x_k per stage next to the input (first channel)."""
    stages = trace["stages"]
    rows = len(stages)
    cols = 4 + (1 if clean is not None else 0)
    fig, axes = plt.subplots(rows, cols, figsize=(1.7 * cols, 1.7 * rows), squeeze=False)
    for k, s in enumerate(stages):
        panels = [("y", y), ("x_hat", s["x_hat"]), ("x_tilde", s["x_tilde"]), ("x_k", s["x_k"])]
        if clean is not None:
            panels.append(("clean", clean))
        for j, (name, img) in enumerate(panels):
            ax = axes[k, j]
            ax.imshow(np.clip(img[0], 0, 1), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if k == 0:
                ax.set_title(name, fontsize=8)
        axes[k, 0].set_ylabel(f"stage {k + 1}", fontsize=8)
    return _save(fig, path)


def gradcheck_bars(results, path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.4))
    errs = [max(r.max_rel_error, 1e-16) for r in results]
    colors = ["C0" if r.passed else "C3" for r in results]
    ax.bar([r.name for r in results], errs, color=colors)
    ax.axhline(results[0].tol if results else 1e-4, color="gray", ls="--")
    ax.set_yscale("log")
    ax.set_ylabel("max relative error")
    ax.tick_params(axis="x", rotation=70, labelsize=6)
    return _save(fig, path)
