"""Figures written to image files (non-interactive backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import binned_statistic_2d  # noqa: E402

from .pipeline import RadialCurve  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    # keep output bytes stable across runs
    "svg.hashsalt": "sic-calib",
}
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_PNG_META if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_disparity_map(pd, d_tot, path, sensor=None, cod=None, title: str = "Total disparity",
                       bins: int = 96) -> Path:
    """Per-point disparity averaged over pixel bins and shown as an image."""
    pd = np.asarray(pd, dtype=float)
    d_tot = np.asarray(d_tot, dtype=float)
    if sensor is not None:
        extent = (0.0, float(sensor.width), 0.0, float(sensor.height))
    else:
        extent = (pd[:, 0].min(), pd[:, 0].max(), pd[:, 1].min(), pd[:, 1].max())
    ny = max(1, int(round(bins * (extent[3] - extent[2]) / max(extent[1] - extent[0], 1e-9))))
    grid = binned_statistic_2d(pd[:, 1], pd[:, 0], d_tot, statistic="mean", bins=(ny, bins),
                               range=((extent[2], extent[3]), (extent[0], extent[1]))).statistic
    with plt.rc_context({**_STYLE, "axes.grid": False}):
        fig, ax = plt.subplots(figsize=(6.0, 4.6))
        im = ax.imshow(grid, origin="upper", cmap="viridis",
                       extent=(extent[0], extent[1], extent[3], extent[2]), interpolation="nearest")
        fig.colorbar(im, ax=ax, label="D_tot (px)")
        if cod is not None:
            ax.plot([cod[0]], [cod[1]], "r+", ms=10, mew=1.5, label="COD")
            ax.legend(loc="upper right")
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
        ax.set_title(title)
        return _save(fig, path)


def plot_radial_curves(curves: dict[str, RadialCurve], path, title: str = "Radial distortion") -> Path:
    """``r_u - r_d`` against ``r_d`` for each labelled curve."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for label, c in curves.items():
            step = max(1, len(c) // 20_000)
            ax.plot(c.r_d[::step], (c.r_u - c.r_d)[::step], ".", ms=1.5, label=label)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("r_d (px)")
        ax.set_ylabel("r_u - r_d (px)")
        ax.set_title(title)
        ax.legend(markerscale=6)
        return _save(fig, path)


def plot_scaling_family(family, path) -> Path:
    """Displacement curves ``S r_u - r_d`` for a range of scales."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        step = max(1, family.r_d.size // 5000)
        for i, s in enumerate(family.scales):
            lw = 2.0 if i == family.tangent_index else 0.8
            ax.plot(family.r_d[::step], family.displacement[i, ::step], lw=lw, label=f"S = {s:.4f}")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("r_d (px)")
        ax.set_ylabel("S r_u - r_d (px)")
        ax.legend(ncol=2)
        return _save(fig, path)


def plot_sweep(rows: list[dict], path, parameters=("fx", "fy", "u0", "v0", "undistorted_disparity")) -> Path:
    """Mean absolute error against noise level, one panel per parameter."""
    present = [p for p in parameters if any(r["parameter"] == p for r in rows)]
    if not present:
        present = sorted({r["parameter"] for r in rows})
    n = len(present)
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.0), squeeze=False)
        for ax, p in zip(axes[0], present):
            for mode in sorted({r["mode"] for r in rows}):
                sel = [r for r in rows if r["parameter"] == p and r["mode"] == mode]
                if not sel:
                    continue
                s = np.array([r["sigma"] for r in sel])
                m = np.array([r["mean_error"] for r in sel])
                e = np.array([r["std_error"] for r in sel])
                ax.errorbar(s, m, yerr=e, marker="o", ms=3, capsize=2, label=mode)
            ax.set_title(p)
            ax.set_xlabel("sigma (px)")
        axes[0][0].set_ylabel("error")
        axes[0][0].legend()
        fig.tight_layout()
        return _save(fig, path)
