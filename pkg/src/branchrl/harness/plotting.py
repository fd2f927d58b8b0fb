"""Learning-curve SVGs: mean line with a population-std band across seeds."""
from __future__ import annotations

import csv
import os
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# reproducible SVG ids and no timestamp metadata, so reruns are byte-identical
matplotlib.rcParams["svg.hashsalt"] = "branchrl"
_SVG_META = {"Date": None, "Creator": "branchrl"}


def read_csv_columns(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [r[k] for r in rows] for k in rows[0]}


def _floats(values):
    out = []
    for v in values:
        try:
            out.append(float(v))
        except (TypeError, ValueError):
            out.append(float("nan"))
    return np.array(out)


def aggregate(series: list[tuple[np.ndarray, np.ndarray]]):
    """Mean and population std over runs; resamples to the coarsest grid if grids differ.

    Returns ``(x, mean, std, warning_or_None)``.
    """
    grids = [x for x, _ in series]
    note = None
    if all(len(g) == len(grids[0]) and np.array_equal(g, grids[0]) for g in grids):
        x = grids[0]
        ys = np.stack([y for _, y in series])
    else:
        coarse = min(grids, key=len)
        lo = max(g.min() for g in grids)
        hi = min(g.max() for g in grids)
        x = coarse[(coarse >= lo) & (coarse <= hi)]
        ys = np.stack([np.interp(x, g, y) for g, y in series])
        note = f"step grids differ across runs; resampled to a {len(x)}-point grid"
        warnings.warn(note)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return x, np.nanmean(ys, axis=0), np.nanstd(ys, axis=0), note


def emit_learning_curve(csv_paths, column: str, out_svg, x_column: str = "env_steps",
                        title: str | None = None, threshold: float | None = None):
    """Write the SVG; returns ``(path, warning_or_None)``. Nothing is written on error."""
    paths = list(csv_paths)
    if not paths:
        raise ValueError("no input CSVs")
    series = []
    for p in paths:
        cols = read_csv_columns(p)
        if column not in cols or x_column not in cols:
            raise ValueError(f"{p}: missing column {column!r} or {x_column!r}")
        x, y = _floats(cols[x_column]), _floats(cols[column])
        if len(y) == 0 or np.all(np.isnan(y)):
            raise ValueError(f"{p}: column {column!r} is empty")
        series.append((x, y))
    x, mean, std, note = aggregate(series)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, mean, color="C0", lw=1.5, label=f"mean of {len(series)}")
    ax.fill_between(x, mean - std, mean + std, color="C0", alpha=0.25, lw=0, label="±1 std (population)")
    if threshold is not None:
        ax.axhline(threshold, color="k", ls="--", lw=0.8, label="threshold")
    ax.set_xlabel(x_column)
    ax.set_ylabel(column)
    ax.set_title(title or f"{column}: mean ± population std over {len(series)} run(s)", fontsize=9)
    ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    out = Path(out_svg)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    fig.savefig(tmp, format="svg", metadata=_SVG_META)
    plt.close(fig)
    os.replace(tmp, out)
    return out, note


def emit_scatter(x, y, out_svg, xlabel: str, ylabel: str, title: str, diagonal: bool = False):
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(x, y, s=14, color="C1")
    if diagonal and len(x):
        lo, hi = float(np.nanmin([np.nanmin(x), np.nanmin(y)])), float(np.nanmax([np.nanmax(x), np.nanmax(y)]))
        ax.plot([lo, hi], [lo, hi], color="k", lw=0.8, ls="--")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    out = Path(out_svg)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    fig.savefig(tmp, format="svg", metadata=_SVG_META)
    plt.close(fig)
    os.replace(tmp, out)
    return out
