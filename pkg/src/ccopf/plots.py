"""Figure rendering for run reports and per-minute violation tables.

Figures are drawn on explicit Figure objects with the Agg canvas, so no
global backend or GUI is touched; every function writes a PNG next to the
tabular output it illustrates.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _finish(fig: Figure, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    FigureCanvasAgg(fig)
    fig.savefig(out_path, dpi=140)
    return out_path


def render_report_figure(report, out_path: str | Path) -> Path:
    """Summary panels: worst-case violation fractions and VUF metrics."""
    rows = report.replications
    reps = np.array([row["replication"] for row in rows])
    eps_v = float(report.config.get("eps_v", 0.05))
    eps_q = float(report.config.get("eps_q", 0.05))

    fig = Figure(figsize=(11, 8), layout="constrained")
    axes = fig.subplots(2, 2)

    ax = axes[0][0]
    width = 0.38
    ax.bar(reps - width / 2, [row["in_e_v_max"] for row in rows], width,
           label="in-sample", color="#3b6fb6")
    ax.bar(reps + width / 2, [row["out_e_v_max"] for row in rows], width,
           label="out-of-sample", color="#d08435")
    ax.axhline(eps_v, color="k", ls="--", lw=1, label=f"target {eps_v:g}")
    ax.set_xlabel("replication")
    ax.set_ylabel("worst-case voltage violation fraction")
    ax.legend(fontsize=8)

    ax = axes[0][1]
    q_in = np.maximum([row["in_e_q_upper_max"] for row in rows],
                      [row["in_e_q_lower_max"] for row in rows])
    q_out = np.maximum([row["out_e_q_upper_max"] for row in rows],
                       [row["out_e_q_lower_max"] for row in rows])
    ax.bar(reps - width / 2, q_in, width, label="in-sample", color="#3b6fb6")
    ax.bar(reps + width / 2, q_out, width, label="out-of-sample",
           color="#d08435")
    ax.axhline(eps_q, color="k", ls="--", lw=1, label=f"target {eps_q:g}")
    ax.set_xlabel("replication")
    ax.set_ylabel("worst-case reactive violation fraction")
    ax.legend(fontsize=8)

    ax = axes[1][0]
    ax.plot(reps, [row["nominal_vuf_pct"] for row in rows], "o-",
            label="nominal")
    ax.plot(reps, [row["in_mean_vuf_pct"] for row in rows], "s-",
            label="in-sample mean")
    ax.plot(reps, [row["out_mean_vuf_pct"] for row in rows], "^-",
            label="out-of-sample mean")
    ax.set_xlabel("replication")
    ax.set_ylabel("total VUF (%)")
    ax.legend(fontsize=8)

    ax = axes[1][1]
    deltas = [row["vuf_delta_normalized"] for row in rows]
    vals = [0.0 if d is None else d for d in deltas]
    ax.bar(reps, vals, 0.6, color="#4c9f70")
    ax.axhline(0.0, color="k", lw=1)
    ax.set_xlabel("replication")
    ax.set_ylabel("normalized out-of-sample VUF delta")

    fig.suptitle(f"method: {report.config.get('method', '?')}, "
                 f"capping: {report.config.get('capping', False)}")
    return _finish(fig, out_path)


def render_timeseries_figure(table, out_path: str | Path, *,
                             eps_v: float = 0.05) -> Path:
    """Minute-of-day violation fractions and worst overshoots, four panels."""
    minutes = table["minute"].to_numpy()
    hours = minutes / 60.0

    fig = Figure(figsize=(11, 8), layout="constrained")
    axes = fig.subplots(2, 2)

    ax = axes[0][0]
    ax.plot(hours, table["frac_v_upper"], label="upper", color="#b3403a")
    ax.plot(hours, table["frac_v_lower"], label="lower", color="#3b6fb6")
    ax.axhline(eps_v, color="k", ls="--", lw=1, label=f"target {eps_v:g}")
    ax.set_ylabel("fraction of connections violating")
    ax.set_xlabel("hour of day")
    ax.set_title("voltage violations")
    ax.legend(fontsize=8)

    ax = axes[0][1]
    ax.plot(hours, table["worst_v_upper"], label="upper", color="#b3403a")
    ax.plot(hours, table["worst_v_lower"], label="lower", color="#3b6fb6")
    ax.set_ylabel("worst overshoot (p.u.)")
    ax.set_xlabel("hour of day")
    ax.set_title("voltage overshoot magnitude")
    ax.legend(fontsize=8)

    ax = axes[1][0]
    ax.plot(hours, table["frac_q_upper"], label="upper", color="#b3403a")
    ax.plot(hours, table["frac_q_lower"], label="lower", color="#3b6fb6")
    ax.set_ylabel("fraction of inverters violating")
    ax.set_xlabel("hour of day")
    ax.set_title("reactive-limit violations")
    ax.legend(fontsize=8)

    ax = axes[1][1]
    ax.plot(hours, table["worst_q_upper"], label="upper", color="#b3403a")
    ax.plot(hours, table["worst_q_lower"], label="lower", color="#3b6fb6")
    ax.set_ylabel("worst overshoot (p.u.)")
    ax.set_xlabel("hour of day")
    ax.set_title("reactive overshoot magnitude")
    ax.legend(fontsize=8)

    return _finish(fig, out_path)
