"""Quality-vs-invocations figures from eval CSV rows."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FAMILIES = (("dd-hybrid", "DD hybrid", "s"), ("dd-", "DD", "o"), ("skip-", "skip-n", "^"))


def family(system: str):
    for prefix, label, marker in FAMILIES:
        if system.startswith(prefix):
            return label, marker
    return system, "D"


def group_rows(rows):
    """Map family label -> (marker, rows sorted by steps)."""
    groups = {}
    for r in rows:
        label, marker = family(r["system"])
        groups.setdefault(label, (marker, []))[1].append(r)
    return {k: (m, sorted(v, key=lambda r: (r["steps"], r["system"]))) for k, (m, v) in groups.items()}


def plot_tv_vs_steps(rows, path, title="joint TV to teacher vs model invocations"):
    """Write a vector figure (format from the suffix, e.g. .svg) and return its path."""
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    matplotlib.rcParams["svg.hashsalt"] = "ardistill"
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, (marker, rs) in group_rows(rows).items():
        xs = [r["steps"] for r in rs]
        ys = [r["tv_joint"] for r in rs]
        ax.plot(xs, ys, marker=marker, linestyle="-" if len(rs) > 1 else "none", label=label)
        if len(rs) > 1:
            for r in rs:
                ax.annotate(r["system"], (r["steps"], r["tv_joint"]), fontsize=6,
                            textcoords="offset points", xytext=(3, 3))
    if any(r["steps"] > 0 for r in rows):
        ax.set_xscale("log")
    ax.set_xlabel("model invocations per sample")
    ax.set_ylabel("joint TV")
    ax.set_ylim(bottom=0.0)
    ax.set_title(title, fontsize=9)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path
