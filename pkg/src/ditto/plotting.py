"""Mean and standard-error band plots; every figure has a CSV twin (x,mean,stderr,n)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import mean_stderr  # noqa: E402


def summarize(points: Mapping[float, Sequence[float]]) -> list[tuple[float, float, float, int]]:
    """{x: [values...]} -> sorted rows (x, mean, stderr, n)."""
    rows = []
    for x in sorted(points):
        m, se = mean_stderr(points[x])
        rows.append((float(x), m, se, len(points[x])))
    return rows


def write_band_csv(path: str | Path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "mean", "stderr", "n"])
        for row in rows:
            w.writerow(row)


def read_band_csv(path: str | Path) -> list[tuple[float, float, float, int]]:
    with open(path) as f:
        return [(float(r["x"]), float(r["mean"]), float(r["stderr"]), int(r["n"])) for r in csv.DictReader(f)]


def band_plot(series: Mapping[str, Mapping[float, Sequence[float]]], out_stem: str | Path,
              xlabel: str = "", ylabel: str = "", title: str = "", logx: bool = False,
              reference: Mapping[str, float] | None = None) -> list[Path]:
    """Plot one mean line with a +-1 stderr band per series.

    Writes ``<stem>.png`` plus ``<stem>.<series>.csv`` per series and returns
    the written paths.  Horizontal reference lines (e.g. an expert score or a
    horizon-free baseline) can be added through ``reference``.
    """
    stem = Path(out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, points in series.items():
        rows = summarize(points)
        csv_path = stem.with_name(f"{stem.name}.{name}.csv")
        write_band_csv(csv_path, rows)
        written.append(csv_path)
        xs = [r[0] for r in rows]
        means = [r[1] for r in rows]
        lo = [r[1] - r[2] for r in rows]
        hi = [r[1] + r[2] for r in rows]
        line, = ax.plot(xs, means, marker="o", label=name)
        ax.fill_between(xs, lo, hi, alpha=0.25, color=line.get_color())
    for name, value in (reference or {}).items():
        ax.axhline(value, linestyle="--", color="gray", linewidth=1)
        ax.annotate(name, (0.01, value), xycoords=("axes fraction", "data"), fontsize=8, va="bottom")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    png = stem.with_suffix(".png")
    fig.savefig(png, dpi=100)
    plt.close(fig)
    written.append(png)
    return written
