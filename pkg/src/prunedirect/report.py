"""Report rendering: objective profiles and permutation histograms as CSV,
with matplotlib figures written next to each CSV."""

from __future__ import annotations

import csv
import math
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .permtest import PermutationReport
from .regmodel import Evaluator, logvar_transform
from .search import ScanResult
from .simpop import Population


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory plus rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def objective_profile(pop: Population) -> list[dict]:
    """Single-locus objective at every lattice point (one row per point)."""
    ev = Evaluator(pop)
    rows = []
    for i, pos in enumerate(pop.gmap.lattice_points()):
        fr = ev.fit_columns((i,))
        rows.append(
            {
                "chromosome": pos.chromosome,
                "position_cm": pos.offset,
                "rss": fr.rss,
                "logvar": fr.logvar,
            }
        )
    return rows


def write_profile_csv(rows: list[dict], path: str | Path) -> None:
    out = []
    fields = ["chromosome", "position_cm", "rss", "logvar"]
    out.append(",".join(fields))
    for r in rows:
        out.append(",".join(repr(r[f]) if isinstance(r[f], float) else str(r[f]) for f in fields))
    atomic_write_text(path, "\n".join(out) + "\n")


def render_profile_figure(rows: list[dict], path: str | Path, best: ScanResult | None = None) -> None:
    chroms = sorted({r["chromosome"] for r in rows})
    fig, axes = plt.subplots(1, len(chroms), figsize=(4.5 * len(chroms), 3.2), sharey=True, squeeze=False)
    for ax, chrom in zip(axes[0], chroms):
        sub = [r for r in rows if r["chromosome"] == chrom]
        x = [r["position_cm"] for r in sub]
        y = [r["logvar"] for r in sub]
        ax.plot(x, y, lw=1.2)
        if best is not None:
            for pos in best.best_positions:
                if pos.chromosome == chrom:
                    ax.axvline(pos.offset, color="crimson", ls="--", lw=0.9)
        ax.set_xlabel(f"chromosome {chrom} (cM)")
        ax.set_title(f"chromosome {chrom}")
    axes[0][0].set_ylabel("LogVar")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def permutation_histogram(report: PermutationReport, n_bins: int = 20) -> list[dict]:
    """Histogram rows of the permuted optimum RSS; bin counts sum to n_perms."""
    if report.optima_rss is None:
        raise ValueError("histogram needs per-permutation optima (full-search report)")
    values = np.asarray(report.optima_rss)
    counts, edges = np.histogram(values, bins=n_bins)
    return [
        {"bin_left": float(edges[i]), "bin_right": float(edges[i + 1]), "count": int(counts[i])}
        for i in range(len(counts))
    ]


def write_histogram_csv(rows: list[dict], path: str | Path) -> None:
    out = ["bin_left,bin_right,count"]
    for r in rows:
        out.append(f"{r['bin_left']!r},{r['bin_right']!r},{r['count']}")
    atomic_write_text(path, "\n".join(out) + "\n")


def render_histogram_figure(rows: list[dict], path: str | Path, candidate_rss: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    lefts = [r["bin_left"] for r in rows]
    widths = [r["bin_right"] - r["bin_left"] for r in rows]
    ax.bar(lefts, [r["count"] for r in rows], width=widths, align="edge", edgecolor="white")
    if candidate_rss is not None and math.isfinite(candidate_rss):
        ax.axvline(candidate_rss, color="crimson", ls="--", lw=1.0, label="candidate")
        ax.legend(frameon=False)
    ax.set_xlabel("permuted optimum RSS")
    ax.set_ylabel("permutations")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def summary_text(
    pop: Population,
    scan: ScanResult | None,
    perm: PermutationReport | None,
) -> str:
    lines = []
    gmap = pop.gmap
    lines.append(f"population: n={pop.n} {pop.cross_type}, {len(gmap.chromosomes)} chromosomes, "
                 f"{gmap.n_points} lattice points at {gmap.lattice_step:g} cM")
    if scan is not None:
        pos = ", ".join(str(p) for p in scan.best_positions)
        lines.append(f"scan: d={scan.d} best at [{pos}]")
        lines.append(f"  rss={scan.best_rss:.6g} logvar={scan.best_logvar:.6g}")
        lines.append(
            f"  evaluations={scan.evaluations} (raw {scan.evaluations_raw}), "
            f"pruned_boxes={scan.pruned_boxes}, prune_tests={scan.prune_tests}"
        )
        lines.append(f"  aggregate_epsilon={scan.aggregate_epsilon:.3g}, terminated={scan.terminated}")
    if perm is not None:
        lines.append(
            f"permutations: {perm.n_perms} ({perm.mode}), exceeding={perm.n_exceeding}, "
            f"p={perm.p_value:.4g}"
        )
    return "\n".join(lines) + "\n"
