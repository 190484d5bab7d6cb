"""Static figures for the report path. Every plotted number also lives in a CSV."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}
PROVENANCE_COLORS = {"radiomic": "#1f77b4", "genomic": "#d62728", "clinical": "#2ca02c", "": "#7f7f7f"}


def _save(fig, path):
    # fixed metadata keeps reruns byte-stable where the backend allows
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def psnr_curve(series, path, baseline=None, title="Holdout PSNR"):
    """series: dict label -> list of (step, psnr)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for label, pts in series.items():
            pts = [(s, p) for s, p in pts if not math.isnan(p)]
            if pts:
                ax.plot(*zip(*pts), marker="o", ms=2, label=label)
        if baseline is not None and not math.isnan(baseline):
            ax.axhline(baseline, ls="--", c="k", lw=0.8, label="input copy")
        ax.set_xlabel("step")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def shap_bar(ranking, path, top_k=20):
    """Horizontal bars of mean |SHAP| per feature, largest at the top, colored by provenance."""
    rows = ranking[:top_k][::-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 0.25 * len(rows) + 1))
        ax.barh([r.feature for r in rows], [r.mean_abs_shap for r in rows],
                color=[PROVENANCE_COLORS.get(r.provenance, "#7f7f7f") for r in rows])
        ax.set_xlabel("mean(|SHAP value|) (days)")
        handles = [plt.Rectangle((0, 0), 1, 1, color=c) for p, c in PROVENANCE_COLORS.items()
                   if p and any(r.provenance == p for r in rows)]
        labels = [p for p in PROVENANCE_COLORS if p and any(r.provenance == p for r in rows)]
        if handles:
            ax.legend(handles, labels, frameon=False, loc="lower right")
        _save(fig, path)


def grouped_bars(groups, series, values, path, ylabel, title=None):
    """values[i][j]: bar for group i, series j."""
    x = np.arange(len(groups))
    width = 0.8 / max(1, len(series))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for j, name in enumerate(series):
            ax.bar(x + (j - (len(series) - 1) / 2) * width, [v[j] for v in values], width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(groups)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)


def ablation_plot(rows, path):
    """rows: [modalities, dice_et, dice_wt, dice_tc]."""
    grouped_bars([r[0] for r in rows], ["ET", "WT", "TC"], [r[1:4] for r in rows], path,
                 "Dice", "Dice by input modalities")


def box_count_plot(result, path, title="Box counting"):
    x = np.log(1.0 / np.asarray(result.scales, float))
    y = np.log(np.asarray(result.counts, float))
    slope, icpt = np.polyfit(x, y, 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 3))
        ax.plot(x, y, "o")
        ax.plot(x, slope * x + icpt, "-", label=f"D = {result.dimension:.3f}")
        ax.set_xlabel("log(1/s)")
        ax.set_ylabel("log N(s)")
        ax.set_title(title)
        ax.legend(frameon=False)
        _save(fig, path)
