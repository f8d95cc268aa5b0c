"""Figure rendering for CLI artifacts.

Every subcommand that writes a delimited result also renders a matplotlib
figure next to it.  Figures are written with fixed dpi and stripped PNG
metadata so identical runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_corollary(rows: list[dict], path) -> None:
    """Expected KLD vs design index, one panel per (n, sigma_eps), one line
    per (K, sigma_u)."""
    ns = sorted({r["n"] for r in rows})
    eps_vals = sorted({r["sigma_eps"] for r in rows})
    fig, axes = plt.subplots(
        len(ns), len(eps_vals), figsize=(4.5 * len(eps_vals), 3.2 * len(ns)), squeeze=False
    )
    for i, n in enumerate(ns):
        for j, se in enumerate(eps_vals):
            ax = axes[i][j]
            combos = sorted({(r["K"], r["sigma_u"]) for r in rows})
            for k, su in combos:
                pts = sorted(
                    (r["design_index"], r["expected_kld"])
                    for r in rows
                    if r["n"] == n and r["sigma_eps"] == se and r["K"] == k and r["sigma_u"] == su
                )
                if pts:
                    ax.plot(*zip(*pts), marker="o", ms=3, lw=1, label=f"K={k}, $\\sigma_u$={su:g}")
            ax.set_title(f"n={n}, $\\sigma_\\epsilon$={se:g}", fontsize=9)
            ax.set_xlabel("design index")
            ax.set_ylabel("expected KLD")
    axes[0][0].legend(fontsize=6, ncol=2)
    _finish(fig, path)


def plot_efficiency(rows: list[dict], path) -> None:
    """Relative efficiency vs sigma_u, one line per (design, reference)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    combos = sorted({(r["design"], r["reference"]) for r in rows})
    for design, ref in combos:
        pts = sorted(
            (r["sigma_u"], r["efficiency"])
            for r in rows
            if r["design"] == design and r["reference"] == ref
        )
        ax.plot(*zip(*pts), marker="o", label=f"{design} under {ref}")
    ax.axhline(0.9, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("$\\sigma_u$")
    ax.set_ylabel("relative efficiency")
    ax.legend(fontsize=7)
    _finish(fig, path)


def plot_trace(steps: list[tuple], path) -> None:
    """Objective value after each accepted exchange."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if steps:
        ax.plot(range(1, len(steps) + 1), [s[4] for s in steps], marker="o", ms=3)
    ax.set_xlabel("accepted exchange")
    ax.set_ylabel("expected utility")
    _finish(fig, path)


def plot_transects(raster, transects, points: np.ndarray, path) -> None:
    """Bathymetry image with the selected transects overlaid."""
    from .geo import transect_endpoint

    fig, ax = plt.subplots(figsize=(6, 6))
    e_min, e_max, n_min, n_max = raster.extent
    grid = raster.layers["depth"]
    im = ax.imshow(grid, extent=(e_min, e_max, n_min, n_max), origin="upper", cmap="viridis")
    fig.colorbar(im, ax=ax, label="depth (m)")
    for t in transects:
        e1, n1 = transect_endpoint(t)
        ax.plot([t.e0, e1], [t.n0, n1], color="red", lw=1.5)
    if points is not None and len(points):
        ax.plot(points[:, 0], points[:, 1], ".", color="white", ms=1)
    ax.set_xlabel("easting (m)")
    ax.set_ylabel("northing (m)")
    _finish(fig, path)


def plot_model_probs(names: list[str], probs: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names)), 3.5))
    ax.bar(range(len(names)), probs)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_ylabel("posterior probability")
    _finish(fig, path)


def plot_utility(value: float, mc_se: float, path) -> None:
    fig, ax = plt.subplots(figsize=(3, 3.5))
    ax.bar([0], [value], yerr=[2 * mc_se] if np.isfinite(mc_se) else None, width=0.4)
    ax.set_xticks([0])
    ax.set_xticklabels(["design"])
    ax.set_ylabel("expected utility")
    _finish(fig, path)


def plot_pilot_prior(model, prior, path) -> None:
    """Smooth-effect curves implied by the design prior (mean and +-2 sd of
    the linear-plus-spline effect, spline coefficients at their prior mean
    spread)."""
    fig, axes = plt.subplots(
        1, max(1, len(model.bases)), figsize=(4.5 * max(1, len(model.bases)), 3.5), squeeze=False
    )
    labels = list(prior.labels)
    for ax, (name, basis) in zip(axes[0], sorted(model.bases.items())):
        grid = np.linspace(basis.lo, basis.hi, 200)
        xn, z = basis.transform(grid)
        idx_b = labels.index(f"beta:{name}")
        eta = prior.mean[labels.index("beta:intercept")] + xn * prior.mean[idx_b]
        u_idx = [labels.index(f"u:{name}:{j}") for j in range(basis.k) if f"u:{name}:{j}" in labels]
        if u_idx:
            eta = eta + z @ prior.mean[u_idx]
        sd = np.sqrt(xn**2 * prior.cov[idx_b, idx_b])
        ax.plot(grid, eta, color="C0")
        ax.fill_between(grid, eta - 2 * sd, eta + 2 * sd, alpha=0.25, color="C0")
        ax.set_xlabel(name)
        ax.set_ylabel("linear predictor")
    if not model.bases:
        axes[0][0].set_axis_off()
    _finish(fig, path)
