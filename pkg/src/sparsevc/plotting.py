"""Figures written next to the CSV reports.

Everything renders through the Agg backend to PNG files; metadata is
pinned so repeated runs give byte-identical images.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)


def plot_gcv(trace, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ok = np.isfinite(trace.scores)
        ax.loglog(trace.grid[ok], trace.scores[ok], "o-", ms=3)
        ax.axvline(trace.chosen, color="C3", ls="--", lw=1, label=f"chosen {trace.chosen:.3g}")
        ax.set_xlabel("tau0")
        ax.set_ylabel("GCV score")
        ax.legend()
        _save(fig, path)


def plot_cv(cv, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for f, errs in enumerate(cv.fold_errors):
            ax.plot(cv.grid, errs, color="0.7", lw=0.8, label="folds" if f == 0 else None)
        ax.plot(cv.grid, cv.curve, "o-", ms=3, color="C0", label="pooled")
        ax.axvline(cv.chosen, color="C3", ls="--", lw=1, label=f"chosen M={cv.chosen:g}")
        ax.set_xlabel("budget M")
        ax.set_ylabel("held-out MSE")
        ax.legend()
        _save(fig, path)


def plot_curves(model, path, truth=None, n_points: int = 101):
    from .predictor import coefficient_curves

    t = np.linspace(0.0, 1.0, n_points)
    curves = coefficient_curves(model, t)
    sel = model.selected
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for k, j in enumerate(sel):
            ax.plot(t, curves[j], color=f"C{k % 10}", label=model.covariate_names[j])
            if truth is not None:
                ax.plot(t, truth.beta(j, t), color=f"C{k % 10}", ls=":", lw=1)
        ax.axvline(np.max(model.knot_times), color="0.5", lw=0.8, ls="--")
        ax.set_xlabel("scaled time t")
        ax.set_ylabel("beta_j(t)")
        if sel:
            ax.legend(ncol=2)
        _save(fig, path)


def plot_waves(rows, path):
    """Holdout RMSE per information level; thin lines are single seeds."""
    levels = sorted({r.level for r in rows})
    seeds = sorted({r.seed for r in rows})
    R = np.full((len(seeds), len(levels)), np.nan)
    for r in rows:
        R[seeds.index(r.seed), levels.index(r.level)] = r.rmse
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for row in R:
            ax.plot(levels, row, color="0.75", lw=0.7)
        ax.plot(levels, np.nanmean(R, axis=0), "o-", color="C0", label="mean over seeds")
        ax.set_xticks(levels)
        ax.set_xticklabels([f"Model {lv}" for lv in levels])
        ax.set_ylabel("holdout RMSE at horizon")
        ax.legend()
        _save(fig, path)
