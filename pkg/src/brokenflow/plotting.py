"""Figures rendered from the CSV artifacts of a run (Agg backend, PNG files)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path):
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _column(header, rows, name, cast=float):
    j = header.index(name)
    return np.array([cast(r[j]) for r in rows])


def critical_figure(csv_path, png_path):
    h, rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, style in (("tau_b", "k-"), ("mu2", "b."), ("mu1", "g--"), ("tau_f", "r:")):
        y = _column(h, rows, name)
        ax.plot(np.where(np.isfinite(y), y, np.nan), style, label=name, ms=3)
    ax.set_xlabel("boundary point")
    ax.set_ylabel("distance")
    ax.legend(fontsize=8)
    ax.set_title(Path(csv_path).stem)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


def convergence_figure(csv_path, png_path):
    h, rows = _read(csv_path)
    N = _column(h, rows, "parameter")
    e = _column(h, rows, "error")
    slope = np.polyfit(np.log(N), np.log(e), 1)[0]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.loglog(N, e, "o-", label=f"slope {slope:.2f}")
    ax.loglog(N, e[0] * (N / N[0]) ** -0.25, "k--", lw=0.8, label="N^-1/4")
    ax.set_xlabel("N")
    ax.set_ylabel("sup error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


def checks_figure(summary_csv, png_path):
    h, rows = _read(summary_csv)
    rows = [r for r in rows if r[h.index("check")] != "stage_status"]
    labels = [f"{r[1]}:{r[3]} {r[2]}".strip() for r in rows]
    ok = np.array([r[h.index("passed")] == "True" for r in rows])
    fig, ax = plt.subplots(figsize=(7, 0.22 * len(rows) + 1))
    ax.barh(np.arange(len(rows)), np.ones(len(rows)), color=np.where(ok, "tab:green", "tab:red"))
    ax.set_yticks(np.arange(len(rows)))
    ax.set_yticklabels(labels, fontsize=6)
    ax.set_xticks([])
    ax.invert_yaxis()
    ax.set_title(f"{ok.sum()}/{len(ok)} checks passed")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return png_path


def render_report(out) -> list:
    """Render every figure whose source CSV exists in ``out``; returns the PNG paths."""
    out = Path(out)
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    made = []
    for p in sorted(out.glob("critical_*.csv")):
        made.append(critical_figure(p, figs / f"{p.stem}.png"))
    for p in sorted(out.glob("boundary_metric_*.csv")):
        made.append(convergence_figure(p, figs / f"{p.stem}.png"))
    if (out / "summary.csv").exists():
        made.append(checks_figure(out / "summary.csv", figs / "checks.png"))
    return made
