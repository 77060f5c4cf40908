"""Static figures for CLI reports. Always rendered with the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed metadata keeps PNG output byte-stable across runs.
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_trace(trace, path, phase_starts=()):
    """Lower-bound trace of a variational fit."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(trace)), trace, marker=".", lw=1)
    for s in phase_starts:
        ax.axvline(s, color="grey", ls=":", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("lower bound")
    fig.tight_layout()
    _save(fig, path)


def plot_protection_curves(rows, path):
    """Average systemicness against k, one line per (strategy, l)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    series = {}
    for row in rows:
        series.setdefault((row["strategy"], row["l"]), []).append((row["k"], row["avg_systemicness"]))
    for (strategy, count), pts in series.items():
        pts.sort()
        label = "no protection" if strategy == "none" else f"{strategy}, l={count}"
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
    ax.set_xlabel("k")
    ax.set_ylabel("average systemicness")
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_degree_ccdf(in_degree, out_degree, path):
    """Complementary cumulative degree distributions on log axes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for deg, label in ((in_degree, "in-degree"), (out_degree, "out-degree")):
        d = np.sort(np.asarray(deg))
        d = d[d > 0]
        if d.size:
            ccdf = 1.0 - np.arange(d.size) / d.size
            ax.loglog(d, ccdf, marker=".", ls="none", label=label)
    ax.set_xlabel("degree")
    ax.set_ylabel("P(D >= d)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)
