"""SVG rendering of true and predicted rollout trajectories.

One file per sample: fading-alpha trails for each ball over the rollout
window, final positions drawn as to-scale circles, model predictions (if
given) overlaid in a contrasting palette. Output is deterministic: fixed
hash salt, no embedded dates.
"""

from __future__ import annotations

import numpy as np

__all__ = ["render_sample"]

_TRUTH_CMAP = "viridis"
_PRED_COLOR = "#d62728"


def _trail(ax, points: np.ndarray, color, lw: float = 2.0, dashed=False):
    from matplotlib.collections import LineCollection

    segs = np.stack([points[:-1], points[1:]], axis=1)
    n = len(segs)
    alphas = np.linspace(0.15, 0.95, n)
    lc = LineCollection(segs, colors=[color] * n, alpha=None, linewidths=lw,
                        linestyles="--" if dashed else "-")
    lc.set_alpha(None)
    rgba = np.tile(np.asarray(_to_rgba(color)), (n, 1))
    rgba[:, 3] = alphas
    lc.set_color(rgba)
    ax.add_collection(lc)


def _to_rgba(color):
    import matplotlib.colors as mcolors

    return mcolors.to_rgba(color)


def render_sample(rollout_init: np.ndarray, rollout_true: np.ndarray,
                  path, pred: np.ndarray | None = None,
                  box_size: float = 512.0, radius: float = 50.0,
                  title: str | None = None) -> np.ndarray | None:
    """Draw one sample's rollout to an SVG file.

    ``rollout_init``: (N, 4) starting state; ``rollout_true``: (T, N, 4)
    ground-truth frames; ``pred``: optional (T, N, 4) model frames.
    Returns the predicted trail array actually drawn (or None), which
    callers can use to cross-check against the model output.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "latentphys"
    n = rollout_init.shape[0]
    truth_path = np.concatenate([rollout_init[None, :, :2],
                                 rollout_true[:, :, :2]], axis=0)
    pred_path = None
    if pred is not None:
        pred_path = np.concatenate([rollout_init[None, :, :2],
                                    pred[:, :, :2]], axis=0)

    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap(_TRUTH_CMAP)
    for i in range(n):
        color = cmap(0.15 + 0.7 * (i / max(n - 1, 1)))
        _trail(ax, truth_path[:, i], color)
        ax.add_patch(plt.Circle(truth_path[-1, i], radius, color=color,
                                alpha=0.35, lw=0))
        ax.annotate(str(i), truth_path[-1, i], ha="center", va="center",
                    fontsize=9)
    if pred_path is not None:
        for i in range(n):
            _trail(ax, pred_path[:, i], _PRED_COLOR, lw=1.4, dashed=True)
            ax.add_patch(plt.Circle(pred_path[-1, i], radius,
                                    fill=False, ec=_PRED_COLOR, lw=1.2,
                                    ls="--", alpha=0.8))
    ax.set_xlim(0, box_size)
    ax.set_ylim(0, box_size)
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return pred


def render_sweep(rows, path, label: str):
    """Plot predicted vs true log-property with CI bars and the training
    range shaded."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "latentphys"
    xs = [r["true_log"] for r in rows]
    ys = [r["pred_log_mean"] for r in rows]
    lo = [r["pred_log_mean"] - r["ci_lo"] for r in rows]
    hi = [r["ci_hi"] - r["pred_log_mean"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.axvspan(np.log(0.25), np.log(4.0), color="#c8e6c9", alpha=0.6,
               label="training range")
    ax.errorbar(xs, ys, yerr=[lo, hi], fmt="o-", capsize=3,
                color="#1f77b4", label="predicted")
    ax.plot(xs, xs, "k--", lw=1, label="ideal")
    ax.set_xlabel(f"true {label}")
    ax.set_ylabel(f"predicted {label}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
