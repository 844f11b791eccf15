"""Figure rendering for the scenario drivers.

Figures are written next to the delimited output so a run directory is
self-contained; everything uses the Agg backend and never opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_DPI = 150


def _finite(records, xattr, yattr):
    xs, ys = [], []
    for r in records:
        x, y = getattr(r, xattr), getattr(r, yattr)
        if math.isfinite(x) and math.isfinite(y) and x > 0 and y > 0:
            xs.append(x)
            ys.append(y)
    return np.array(xs), np.array(ys)


def render_sweep_figures(records, slopes, out_dir):
    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    styles = {
        "kappa_orig": ("o", "tab:blue", "original"),
        "kappa_scaled": ("s", "tab:orange", "scaled"),
        "kappa_sipic": ("^", "tab:green", "SIPIC"),
    }
    for col, (marker, color, label) in styles.items():
        xs, ys = _finite(records, "eta", col)
        if len(xs) == 0:
            continue
        ax.loglog(xs, ys, marker, ms=3.5, color=color, label=label, alpha=0.8,
                  linestyle="none")
        info = slopes.get(col)
        if info:
            xr = np.array([xs.min(), xs.max()])
            anchor = np.median(ys) / np.median(xs) ** info["slope"]
            ax.loglog(xr, anchor * xr ** info["slope"], "-", lw=1.0,
                      color=color,
                      label=f"{label} slope {info['slope']:.2f}")
    ax.set_xlabel("smallest volume fraction")
    ax.set_ylabel("condition number")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "kappa_vs_eta.png", dpi=_DPI)
    plt.close(fig)

    xs, ys = [], []
    for r in records:
        if math.isfinite(r.fillin) and r.eta > 0:
            xs.append(r.eta)
            ys.append(100.0 * r.fillin)
    if xs:
        fig, ax = plt.subplots(figsize=(6, 4.5))
        ax.semilogx(xs, ys, "o", ms=3.5, color="tab:red")
        ax.set_xlabel("smallest volume fraction")
        ax.set_ylabel("relative fill-in [%]")
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "fillin_vs_eta.png", dpi=_DPI)
        plt.close(fig)


def render_plate_figures(records, histories, out_dir):
    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for col, marker, label in (
        ("kappa_orig", "o", "original"),
        ("kappa_sipic", "^", "SIPIC"),
    ):
        xs, ys = _finite(records, "h", col)
        if len(xs):
            ax.loglog(xs, ys, marker + "-", label=label)
    ax.set_xlabel("mesh size")
    ax.set_ylabel("condition number")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "kappa_vs_h.png", dpi=_DPI)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for col, marker, label in (
        ("energy_error_orig", "o", "original"),
        ("energy_error_sipic", "^", "SIPIC"),
    ):
        xs, ys = _finite(records, "h", col)
        if len(xs):
            ax.loglog(xs, ys, marker + "-", label=label)
    hs = np.array([r.h for r in records])
    ref = [r.energy_error_sipic for r in records if math.isfinite(r.energy_error_sipic)]
    if ref:
        ax.loglog(hs, ref[0] * (hs / hs[0]) ** 4, "k--", lw=0.8,
                  label="4th order")
    ax.set_xlabel("mesh size")
    ax.set_ylabel("strain energy of the error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "energy_convergence.png", dpi=_DPI)
    plt.close(fig)

    if histories and any(h is not None for h in histories):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for rep, label, color in (
            (histories[0], "original", "tab:blue"),
            (histories[1], "SIPIC", "tab:green"),
        ):
            if rep is None:
                continue
            it = np.arange(len(rep.residual_norms))
            ax.semilogy(it, rep.residual_norms, "-", color=color,
                        label=f"{label} residual")
            if rep.energy_errors is not None and len(rep.energy_errors):
                ax.semilogy(it[: len(rep.energy_errors)], rep.energy_errors,
                            "--", color=color, label=f"{label} energy error")
        ax.set_xlabel("CG iteration")
        ax.set_ylabel("norm")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / "cg_history.png", dpi=_DPI)
        plt.close(fig)


def render_manufactured_figures(levels, out_dir):
    out = Path(out_dir)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    hs = np.array([row["h"] for row in levels])
    errs = np.array([row["energy_error"] for row in levels])
    ax.loglog(hs, errs, "o-", label="energy-norm error")
    ax.set_xlabel("mesh size")
    ax.set_ylabel("energy-norm error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "energy_convergence.png", dpi=_DPI)
    plt.close(fig)
