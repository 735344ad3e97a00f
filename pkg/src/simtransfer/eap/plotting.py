import logging

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "simtransfer"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path):
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.debug("wrote figure %s", path)
    return path


def plot_learning_curves(curves, path, x="total_samples", y="mean_return"):
    """Mean episode return against environment steps.

    Parameters
    ----------
    curves : dict
        Label to a metrics :class:`pandas.DataFrame`.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, frame in curves.items():
        frame = frame[frame["status"] == "ok"].dropna(subset=[y])
        ax.plot(frame[x].to_numpy(), frame[y].to_numpy(), label=name)
    ax.set_xlabel(x.replace("_", " "))
    ax.set_ylabel(y.replace("_", " "))
    if curves:
        ax.legend()
    return _save(fig, path)


def plot_report(report, path):
    """Normalized return per held-out environment."""
    fig, ax = plt.subplots(figsize=(6, 4))
    envs = [str(e) for e in report["env"].values]
    ax.bar(envs, report["normalized_return"].values)
    ax.axhline(report.attrs["normalized_mean"], color="k", linestyle="--",
               linewidth=1)
    ax.set_xlabel("held-out environment")
    ax.set_ylabel("normalized return")
    ax.set_title(f"{report.attrs['method']} on {report.attrs['task']}")
    return _save(fig, path)


def plot_comparison(comparison, path):
    """Mean normalized return per method with across-seed error bars."""
    table = comparison.table
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(list(table.index),
           table["normalized_mean"].to_numpy(),
           yerr=table["normalized_std"].to_numpy(),
           capsize=4)
    ax.set_ylabel("normalized return")
    return _save(fig, path)


def plot_ablation(table, path):
    """Mean normalized return over the swept axis, one curve per cross
    value."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [str(v) for v in table["value"].values]
    positions = np.arange(len(labels))
    if "cross_value" in table.dims:
        for cross in table["cross_value"].values:
            sel = table.sel(cross_value=cross)
            ax.errorbar(positions,
                        sel["mean"].values,
                        yerr=sel["std"].values,
                        marker="o",
                        capsize=3,
                        label=f"{table.attrs['cross_axis']}={cross}")
        ax.legend()
    else:
        ax.errorbar(positions,
                    table["mean"].values,
                    yerr=table["std"].values,
                    marker="o",
                    capsize=3)
    ax.set_xticks(positions)
    ax.set_xticklabels(labels)
    ax.set_xlabel(table.attrs["axis"])
    ax.set_ylabel("normalized return")
    return _save(fig, path)
