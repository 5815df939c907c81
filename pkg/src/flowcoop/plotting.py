"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.4,
    "lines.markersize": 4,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}

MODE_STYLE = {
    "EarlyFusion": ("tab:gray", "s"),
    "LateFusion": ("tab:brown", "v"),
    "MiddleNoPrediction": ("tab:blue", "o"),
    "MiddleFlowInfra": ("tab:red", "^"),
    "MiddleFlowVehicle": ("tab:green", "D"),
}


def _figure(width=4.6, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def latency_sweep(rows: list[dict], column: str, path) -> None:
    """One line per fusion mode: ``column`` against latency."""
    fig, ax = _figure()
    for mode in dict.fromkeys(r["mode"] for r in rows):
        pts = sorted((r["latency_ms"], r[column]) for r in rows if r["mode"] == mode)
        color, marker = MODE_STYLE.get(mode, (None, "o"))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=marker, color=color, label=mode)
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel(column.replace("_", " "))
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left")
    _save(fig, path)


def transmission_cost(rows: list[dict], path) -> None:
    """Mean payload bytes per mode on a log axis."""
    per_mode: dict[str, list[float]] = {}
    for r in rows:
        per_mode.setdefault(r["mode"], []).append(r["ab_bytes"])
    modes = list(per_mode)
    vals = [max(1.0, sum(v) / len(v)) for v in per_mode.values()]
    fig, ax = _figure(4.6, 2.8)
    ax.bar(range(len(modes)), vals, color=[MODE_STYLE.get(m, ("tab:gray",))[0] for m in modes])
    ax.set_xticks(range(len(modes)))
    ax.set_xticklabels([m.replace("Middle", "M.") for m in modes], rotation=20, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("AB (bytes / frame)")
    _save(fig, path)


def training_curve(initial: float, epoch_losses: list[float], path, holdout: tuple[float, float] | None = None) -> None:
    fig, ax = _figure(4.0, 2.8)
    ax.plot(range(len(epoch_losses) + 1), [initial, *epoch_losses], marker="o", label="train")
    if holdout is not None:
        ax.axhline(holdout[0], ls="--", color="tab:gray", label="held-out, before")
        ax.axhline(holdout[1], ls=":", color="tab:red", label="held-out, after")
    ax.set_xlabel("epoch")
    ax.set_ylabel("1 - cosine similarity")
    ax.legend()
    _save(fig, path)
