import csv
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_sweep(curve, peaks, path, truths=None):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.fill_between(curve.grid, curve.scores, np.min(curve.scores), alpha=0.3, label="windowed iSDR sum")
    ax.plot(curve.grid, curve.point_scores, "o", ms=4, label="iSDR at query")
    for t in truths or []:
        ax.axvline(t, color="r", ls="--", lw=1)
    if peaks:
        ax.plot([p[0] for p in peaks], [p[1] for p in peaks], "o", mfc="none", mec="C1", ms=10,
                label="detected peak")
    ax.set_xlabel("query distance (m)")
    ax.set_ylabel("dB")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep_csv(csv_path, path):
    from .sweep import SweepCurve
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    curve = SweepCurve([float(r["d_q"]) for r in rows], [float(r["windowed_score"]) for r in rows],
                       [float(r["point_iSDR"]) for r in rows])
    return plot_sweep(curve, [], path)


def plot_training_log(log_path, path):
    with open(log_path) as f:
        recs = [json.loads(line) for line in f if line.strip()]
    ep = [r["epoch"] for r in recs]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ep, [r["train_loss"] for r in recs], label="train")
    val = [(r["epoch"], r["val_loss"]) for r in recs if r.get("val_loss") is not None]
    if val:
        ax.plot(*zip(*val), label="valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
