"""Report figures (written to files; never shown)."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import VertebraLevel  # noqa: E402


def dsc_per_level(report, path) -> Path:
    """Bar chart of mean DSC per vertebral level with per-sample points overlaid."""
    by_level: dict = {}
    for d in report.per_sample.values():
        for name, v in d.items():
            by_level.setdefault(name, []).append(v)
    names = sorted(by_level, key=lambda n: VertebraLevel[n])
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * len(names) + 1.5), 3.2))
    x = np.arange(len(names))
    ax.bar(x, [np.mean(by_level[n]) for n in names], color="0.75", edgecolor="0.3", width=0.7)
    for i, n in enumerate(names):
        ax.plot(np.full(len(by_level[n]), i), by_level[n], "k.", ms=3)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=90)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("label-matched DSC")
    ax.set_title(f"{report.variant}: mean {report.mean_dsc:.3f}", fontsize=9)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def training_curves(metrics_path, path) -> Path:
    """Loss terms (log scale) and validation DSC against epoch."""
    rows = read_metrics(metrics_path)
    terms = sorted({k for r in rows for k in r} - {"epoch", "phase", "sigma", "heat_ema", "val_dsc", "total"})
    fig, (a, b) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for t in terms:
        pts = [(r["epoch"], r[t]) for r in rows if r.get(t) is not None and r[t] > 0]
        if pts:
            a.plot(*zip(*pts), lw=1, label=t)
    a.set_yscale("log")
    a.set_ylabel("loss")
    a.legend(fontsize=7, ncol=3, frameon=False)
    val = [(r["epoch"], r["val_dsc"]) for r in rows if "val_dsc" in r]
    if val:
        b.plot(*zip(*val), "o-", ms=3, color="k")
    # shade phases
    for phase, color in (("gt_box", "tab:blue"), ("pred_box", "tab:green")):
        ep = [r["epoch"] for r in rows if r["phase"] == phase]
        if ep:
            for ax in (a, b):
                ax.axvspan(min(ep) - 0.5, max(ep) + 0.5, color=color, alpha=0.06, lw=0)
    b.set_ylim(0, 1.02)
    b.set_ylabel("val DSC (w/o PP)")
    b.set_xlabel("epoch")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
