"""Figure rendering for report outputs.

Every report path of the CLI can drop matplotlib figures next to its JSON
and CSV outputs; this module owns those plots so the rest of the library
never imports matplotlib.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import EvalReport
from .synth import RoundtripReport

_DIFFICULTY_ORDER = ("easy", "moderate", "hard")


def save_pr_figure(path, report: EvalReport) -> Path:
    """Interpolated precision/recall curves, one line per difficulty."""
    fig, ax = plt.subplots(figsize=(6.0, 4.5))
    for name in _DIFFICULTY_ORDER:
        curve = report.per_difficulty.get(name)
        if curve is None:
            continue
        ax.plot(
            curve.recalls,
            curve.precisions,
            marker=".",
            label=f"{name} (AP {curve.ap * 100.0:.2f})",
        )
    ax.set_xlabel("recall")
    ax.set_ylabel("interpolated precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    ax.set_title(
        f"{report.category} AP, {report.metric} IoU >= {report.iou_threshold:.2f} "
        f"({report.recall_variant})"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_roundtrip_figures(base, report: RoundtripReport) -> list[Path]:
    """Error summaries for a round-trip report.

    ``<base>_errors.png``: median and p95 of each error metric per layout.
    ``<base>_depth.png``:  per-trial center error against depth.
    """
    base = Path(base)
    written: list[Path] = []

    metrics = sorted({m for stats in report.stats.values() for m in stats})
    layouts = list(report.stats)
    if metrics and layouts:
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.6))
        axes = np.atleast_1d(axes)
        xs = np.arange(len(layouts))
        for ax, metric in zip(axes, metrics):
            med = [report.stats[lay][metric]["median"] for lay in layouts]
            p95 = [report.stats[lay][metric]["p95"] for lay in layouts]
            ax.bar(xs - 0.18, med, width=0.36, label="median")
            ax.bar(xs + 0.18, p95, width=0.36, label="p95")
            ax.set_xticks(xs, layouts)
            ax.set_title(metric)
            ax.grid(True, axis="y", alpha=0.3)
        axes[0].legend()
        fig.suptitle(f"lifting error, {report.trials} trials, seed {report.seed}")
        fig.tight_layout()
        out = base.with_name(base.name + "_errors.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)

    if report.records:
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for lay in layouts:
            zs = [r["z"] for r in report.records if r.get(lay)]
            errs = [r[lay]["center_err"] for r in report.records if r.get(lay)]
            if zs:
                ax.scatter(zs, errs, s=8, alpha=0.5, label=lay)
        ax.set_xlabel("ground-truth depth z [m]")
        ax.set_ylabel("center error [m]")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        out = base.with_name(base.name + "_depth.png")
        fig.savefig(out, dpi=120)
        plt.close(fig)
        written.append(out)

    return written
