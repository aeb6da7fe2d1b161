"""PNG figures for experiment results (Agg backend, no display needed)."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render_figures"]

COLORS = {"tweedie": "tab:red", "tsi": "tab:green", "blend": "tab:blue",
          "blend_proxy": "tab:blue", "mala": "tab:gray", "exact": "black", "proxy": "tab:purple"}
STYLES = {"blend_proxy": "--", "proxy": "--"}


def _style(method):
    return dict(color=COLORS.get(method), linestyle=STYLES.get(method, "-"), label=method)


def _mean_by(rows, key):
    acc = defaultdict(list)
    for r in rows:
        if r["status"] == "ok" and np.isfinite(r["value"]):
            acc[r[key]].append(r["value"])
    xs = sorted(acc)
    return np.array(xs, dtype=float), np.array([np.mean(acc[x]) for x in xs]), \
        np.array([np.std(acc[x]) for x in xs])


def _methods(rows):
    return list(dict.fromkeys(r["method"] for r in rows))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _metric_vs(result, out, metrics, xkey, xlabel, fname, logx=False):
    present = [m for m in metrics if result.table(m)]
    if not present:
        return []
    fig, axes = plt.subplots(1, len(present), figsize=(4.2 * len(present), 3.4), squeeze=False)
    for ax, metric in zip(axes[0], present):
        rows = result.table(metric)
        for method in _methods(rows):
            x, y, s = _mean_by([r for r in rows if r["method"] == method], xkey)
            if x.size:
                ax.errorbar(x, y, yerr=s, marker="o", ms=3, capsize=2, **_style(method))
        ax.set_xlabel(xlabel)
        ax.set_ylabel(metric)
        if logx:
            ax.set_xscale("log")
        ax.legend(fontsize=7)
    return [_save(fig, out / fname)]


def _curves(result, out, prefix, fname, ylabel, logy=False):
    groups = defaultdict(list)
    for c in result.curves:
        if c["curve"].startswith(prefix) and c["kept"]:
            groups[c["curve"]].append(c)
    if not groups:
        return []
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, rows in sorted(groups.items()):
        x, y, _ = _mean_by([{**r, "status": "ok"} for r in rows], "t")
        ax.plot(x, y, marker=".", **_style(name[len(prefix):]))
    ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    return [_save(fig, out / fname)]


def _sweep(result, out):
    rows = result.table("log_mmd_ratio")
    dims = sorted({r["d"] for r in rows})
    if not dims:
        return []
    fig, axes = plt.subplots(1, len(dims), figsize=(4.2 * len(dims), 3.4), squeeze=False)
    for ax, d in zip(axes[0], dims):
        sub = [r for r in rows if r["d"] == d]
        for method in _methods(sub):
            x, y, s = _mean_by([r for r in sub if r["method"] == method], "sigma_rel")
            ax.errorbar(x, y, yerr=s, marker="o", ms=3, capsize=2, **_style(method))
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xscale("log")
        ax.set_title(f"d = {d}")
        ax.set_xlabel("sigma_rel")
        ax.set_ylabel("log(MMD / floor)")
        ax.legend(fontsize=7)
    return [_save(fig, out / "regime_sweep.png")]


def _variance(result, out):
    paths = _curves(result, out, "factor_", "variance_factors.png", "time factor", logy=True)
    if paths:
        star = result.table("crossover_t")
        if star:
            # redraw with the crossover marked
            fig = plt.figure(figsize=(5, 3.4))
            ax = fig.gca()
            for name in ("factor_tsi", "factor_tweedie"):
                rows = [c for c in result.curves if c["curve"] == name]
                ax.plot([r["t"] for r in rows], [r["value"] for r in rows], **_style(name[7:]))
            ax.axvline(star[0]["value"], color="k", ls=":", lw=0.8)
            ax.set_xscale("log")
            ax.set_yscale("log")
            ax.set_xlabel("t")
            ax.set_ylabel("time factor")
            ax.legend(fontsize=7)
            _save(fig, paths[0])
    paths += _curves(result, out, "error_variance_", "error_variance.png", "E|s_hat - s|^2", logy=True)
    return paths


def render_figures(result, out):
    """Render the figures matching ``result.config.experiment`` into ``out``."""
    kind = result.config.experiment
    if kind == "prior_sampling":
        return _metric_vs(result, out, ["mmd", "ksd", "score_rmse"], "n_ref", "N_ref", "prior_sampling.png")
    if kind == "rmse_vs_nref":
        return _metric_vs(result, out, ["score_rmse"], "n_ref", "N_ref", "rmse_vs_nref.png")
    if kind == "regime_sweep":
        return _sweep(result, out)
    if kind == "posterior_sampling":
        return _metric_vs(result, out, ["mmd_exact", "rmse_alpha", "forward_error"],
                          "sigma_rel", "sigma_rel", "posterior.png", logx=True)
    if kind == "correlation_curve":
        return _curves(result, out, "rho_", "correlation.png", "rho(t)")
    if kind == "variance_profile":
        return _variance(result, out)
    return []
