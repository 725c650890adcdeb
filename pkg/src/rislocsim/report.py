"""Render metric CSV files into figures (PNG) next to the delimited output.

The CSV is the contract; figures are a convenience layer for eyeballing
sweeps.  Rows are long-format (sweep, sweep_value, metric, value, ...).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .experiments import PARAM_NAMES  # noqa: E402


def read_metric_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"sweep": row["sweep"], "sweep_value": float(row["sweep_value"]),
             "metric": row["metric"], "value": float(row["value"])}
            for row in csv.DictReader(fh)
        ]


def _series(rows):
    out = defaultdict(dict)
    for r in rows:
        out[r["metric"]][r["sweep_value"]] = r["value"]
    return {m: (sorted(d), [d[k] for k in sorted(d)]) for m, d in out.items()}


def _axis_label(rows) -> str:
    return rows[0]["sweep"] if rows else "sweep"


def render_report(metrics_csv, outdir=None) -> list[Path]:
    """Render the standard figures for a metrics CSV; returns written paths."""
    metrics_csv = Path(metrics_csv)
    outdir = Path(outdir) if outdir else metrics_csv.parent
    outdir.mkdir(parents=True, exist_ok=True)
    rows = read_metric_rows(metrics_csv)
    series = _series(rows)
    xlabel = _axis_label(rows)
    stem = metrics_csv.stem
    written = []

    def save(fig, name):
        path = outdir / f"{stem}_{name}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)
        written.append(path)

    if f"rmse_{PARAM_NAMES[0]}" in series:
        fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharex=True)
        for ax, name in zip(axes.ravel(), PARAM_NAMES):
            for key, style, label in ((f"rmse_coarse_{name}", ":o", "coarse"),
                                      (f"rmse_{name}", "-s", "refined"),
                                      (f"crlb_{name}", "--", "bound")):
                if key in series:
                    x, y = series[key]
                    ax.semilogy(x, y, style, label=label, markersize=4)
            ax.set_title(name)
            ax.set_xlabel(xlabel)
            ax.grid(True, which="both", alpha=0.3)
        axes[0, 0].set_ylabel("RMSE")
        axes.ravel()[0].legend(fontsize=8)
        save(fig, "channel_rmse")

    if "nmse_refined" in series:
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for key, style in (("nmse_coarse", ":o"), ("nmse_refined", "-s")):
            if key in series:
                x, y = series[key]
                ax.semilogy(x, y, style, label=key, markersize=4)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("channel NMSE")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        save(fig, "nmse")

    state_keys = ("rmse_p", "rmse_v", "rmse_clock_bias", "rmse_clock_drift")
    if any(k in series for k in state_keys):
        fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
        bounds = ("crlb_p", "crlb_v", "crlb_clock_bias", "crlb_clock_drift")
        coarse = ("rmse_p_coarse", "rmse_v_coarse", None, None)
        dmm = ("crlb_p_dmm", "crlb_v_dmm", None, None)
        for ax, key, bnd, crs, dm in zip(axes.ravel(), state_keys, bounds, coarse, dmm):
            for k, style, label in ((crs, ":o", "coarse"), (key, "-s", "refined"),
                                    (bnd, "--", "bound"), (dm, "-.", "bound (diff)")):
                if k and k in series:
                    x, y = series[k]
                    ax.semilogy(x, y, style, label=label, markersize=4)
            ax.set_title(key.replace("rmse_", ""))
            ax.set_xlabel(xlabel)
            ax.grid(True, which="both", alpha=0.3)
        axes.ravel()[0].legend(fontsize=8)
        save(fig, "state_rmse")

    if "peb_active" in series:
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
        for ax, base in zip(axes, ("peb", "veb")):
            for mode, style in (("active", "-s"), ("passive", "--o")):
                key = f"{base}_{mode}"
                if key in series:
                    x, y = series[key]
                    ax.semilogy(x, y, style, label=mode, markersize=4)
            ax.set_xlabel("added power [dBm]")
            ax.set_ylabel(base.upper())
            ax.grid(True, which="both", alpha=0.3)
            ax.legend(fontsize=8)
        save(fig, "panel_modes")

    return written
