"""Box-plot figures of parameter bias by mechanism and method.

Quantiles follow the (n+1)p linear-interpolation rule; whiskers extend to the
most extreme point within 1.5 IQR of the box. The y-axis is clamped to
[-0.5, 0.5]: points outside are dropped from the drawing, counted, and the
counts reported in a caption side-file.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .study import NO_MECHANISM, FitRecord, _record_triples  # noqa: E402

Y_LIMIT = 0.5
CAPTIONS_FILE = "plot_captions.txt"

MECHANISM_COLORS = {
    NO_MECHANISM: "tab:orange",
    "MCAR": "skyblue",
    "TMAR": "tab:green",
    "MAR": "gold",
    "MNAR": "navy",
    "ATMAR": "chocolate",
}


@dataclass
class PlotSpec:
    """Which bias distributions to draw and how to facet them."""

    parameter: str  # pooled group or record parameter name
    x_variable: str  # record field whose levels span the x axis
    facet_variable: str  # record field fixed per figure
    filename: str


DEFAULT_PLOT_SPECS = (
    PlotSpec("alpha11", "alpha", "gamma", "bias_alpha"),
    PlotSpec("gamma12", "gamma", "alpha", "bias_gamma"),
    PlotSpec("sigma2_mis", "sigma2", "alpha", "bias_sigma2"),
    PlotSpec("lambda2_mis", "sigma2", "alpha", "bias_lambda2"),
)


def quantile_np1(values: np.ndarray, q: float) -> float:
    """(n+1)p quantile with linear interpolation, clamped to the data range."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("empty sample")
    h = (n + 1) * q
    h = min(max(h, 1.0), float(n))
    lo = int(np.floor(h))
    frac = h - lo
    if lo >= n:
        return float(x[-1])
    return float(x[lo - 1] + frac * (x[lo] - x[lo - 1]))


@dataclass
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: np.ndarray
    n_clipped: int = 0


def box_stats(values: np.ndarray, clip: float | None = Y_LIMIT) -> BoxStats | None:
    """Tukey box statistics; values beyond +-clip are dropped and counted."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    n_clipped = 0
    if clip is not None:
        keep = np.abs(values) <= clip
        n_clipped = int(np.sum(~keep))
        values = values[keep]
    if values.size == 0:
        return None
    q1 = quantile_np1(values, 0.25)
    med = quantile_np1(values, 0.50)
    q3 = quantile_np1(values, 0.75)
    iqr = q3 - q1
    lo_bound, hi_bound = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = values[(values >= lo_bound) & (values <= hi_bound)]
    wl = float(np.min(inside)) if inside.size else q1
    wh = float(np.max(inside)) if inside.size else q3
    outliers = values[(values < lo_bound) | (values > hi_bound)]
    return BoxStats(q1, med, q3, wl, wh, outliers, n_clipped)


def _bias_values(records: list[FitRecord], parameter: str) -> np.ndarray:
    triples = _record_triples(records, parameter)
    return np.array([t - e for t, e, _ in triples])


def emit_plots(
    records: list[FitRecord],
    out_dir: str,
    specs: tuple[PlotSpec, ...] = DEFAULT_PLOT_SPECS,
) -> list[str]:
    """Render one SVG per (spec, facet level); returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    captions: list[str] = []
    written: list[str] = []

    for spec in specs:
        facet_levels = sorted({getattr(r, spec.facet_variable) for r in records})
        for facet in facet_levels:
            sub = [r for r in records if getattr(r, spec.facet_variable) == facet]
            methods = sorted({r.method for r in sub})
            mechanisms = [m for m in MECHANISM_COLORS if any(r.mechanism == m for r in sub)]
            x_levels = sorted({getattr(r, spec.x_variable) for r in sub})

            fig, axes = plt.subplots(
                1, max(len(methods), 1), figsize=(3.2 * max(len(methods), 1), 3.4), sharey=True
            )
            axes = np.atleast_1d(axes)
            n_clipped_total = 0
            for ax, method in zip(axes, methods):
                boxes, positions, colors = [], [], []
                for xi, x_level in enumerate(x_levels):
                    for mi, mech in enumerate(mechanisms):
                        cell = [
                            r
                            for r in sub
                            if r.method == method
                            and r.mechanism == mech
                            and getattr(r, spec.x_variable) == x_level
                        ]
                        if not cell:
                            continue
                        stats = box_stats(_bias_values(cell, spec.parameter))
                        if stats is None:
                            continue
                        n_clipped_total += stats.n_clipped
                        boxes.append(
                            {
                                "med": stats.median,
                                "q1": stats.q1,
                                "q3": stats.q3,
                                "whislo": stats.whisker_low,
                                "whishi": stats.whisker_high,
                                "fliers": stats.outliers,
                            }
                        )
                        positions.append(xi * (len(mechanisms) + 1) + mi)
                        colors.append(MECHANISM_COLORS[mech])
                if boxes:
                    artists = ax.bxp(
                        boxes, positions=positions, showfliers=True, patch_artist=True, widths=0.8
                    )
                    for patch, color in zip(artists["boxes"], colors):
                        patch.set_facecolor(color)
                ax.set_title(method, fontsize=9)
                ax.set_ylim(-Y_LIMIT, Y_LIMIT)
                ax.axhline(0.0, color="grey", lw=0.5)
                ax.set_xticks(
                    [i * (len(mechanisms) + 1) + (len(mechanisms) - 1) / 2 for i in range(len(x_levels))]
                )
                ax.set_xticklabels([f"{x:g}" for x in x_levels], fontsize=8)
                ax.set_xlabel(spec.x_variable, fontsize=8)
            axes[0].set_ylabel(f"bias of {spec.parameter}", fontsize=8)
            fig.suptitle(f"{spec.parameter} bias, {spec.facet_variable}={facet:g}", fontsize=10)
            fig.tight_layout()

            fname = f"{spec.filename}_{spec.facet_variable}{facet:g}.svg"
            path = os.path.join(out_dir, fname)
            with plt.rc_context({"svg.hashsalt": fname}):
                fig.savefig(path, metadata={"Date": None})
            plt.close(fig)
            written.append(path)
            captions.append(
                f"{fname}: y-axis restricted to [-{Y_LIMIT}, {Y_LIMIT}]; "
                f"{n_clipped_total} points outside the range were removed. "
                "Boxes span the first to third quartile with the median line inside; "
                "whiskers extend to the most extreme point within 1.5 IQR; "
                "dots beyond the whiskers are outliers."
            )

    with open(os.path.join(out_dir, CAPTIONS_FILE), "w", encoding="utf-8") as fh:
        fh.write("\n".join(captions) + ("\n" if captions else ""))
    return written
