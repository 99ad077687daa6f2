"""Figures rendered from the CSV artifacts of a run.

Only files already written by an experiment are read, so a plot can be
regenerated at any time from an output directory.
"""
from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (5.0, 3.4),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
}


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _col(rows, key, cast=float):
    return np.array([cast(r[key]) for r in rows])


def _semilogy_errorbars(ax, x, y, se, label):
    pos = y > 0
    ax.errorbar(x[pos], y[pos], yerr=se[pos], fmt="o", ms=3, capsize=2, label=label)
    ax.set_yscale("log")


def _fit_params(fit):
    """(slope, intercept) when the fit document holds finite numbers (JSON stores nan as a string)."""
    if not fit:
        return None
    try:
        slope, icpt = float(fit.get("slope")), float(fit.get("intercept"))
    except (TypeError, ValueError):
        return None
    return (slope, icpt) if np.isfinite(slope) and np.isfinite(icpt) else None


def _fit_line(ax, x, slope, intercept, label):
    xs = np.linspace(x.min(), x.max(), 50)
    ax.plot(xs, np.exp(intercept + slope * xs), "--", label=label)


def plot_decay(out, rows, fit=None, name="decay"):
    r, c, se = _col(rows, "r"), _col(rows, "cov"), _col(rows, "stderr")
    fig, ax = plt.subplots()
    _semilogy_errorbars(ax, r, np.abs(c), se, "|Cov|")
    fp = _fit_params(fit)
    if fp:
        _fit_line(ax, r, fp[0], fp[1], f"slope {fp[0]:.3f}")
    ax.set_xlabel("r")
    ax.set_ylabel("|Cov|")
    ax.legend()
    path = os.path.join(out, f"{name}.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_coupling(out, rows, fit=None):
    l, e, se = _col(rows, "l"), _col(rows, "mean_error"), _col(rows, "stderr")
    fig, ax = plt.subplots()
    _semilogy_errorbars(ax, l, e, se, "mean coupling error")
    fp = _fit_params(fit)
    if fp:
        _fit_line(ax, l, fp[0], fp[1], f"slope {fp[0]:.3f}")
    ax.set_xlabel("l")
    ax.set_ylabel("error")
    ax.legend()
    path = os.path.join(out, "coupling.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_kernel(out, rows):
    r, logI = _col(rows, "r"), _col(rows, "log_I")
    fig, ax = plt.subplots()
    ax.plot(r, logI, ".-")
    ax.set_xlabel("r")
    ax.set_ylabel("log I(r)")
    path = os.path.join(out, "kernel.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_green(out, rows):
    fig, ax = plt.subplots()
    dims = sorted({int(r["d"]) for r in rows})
    for d in dims:
        sub = [r for r in rows if int(r["d"]) == d]
        ax.plot(_col(sub, "r"), _col(sub, "logG"), label=f"d={d}")
    ax.set_xscale("log")
    ax.set_xlabel("r")
    ax.set_ylabel("log G")
    ax.legend()
    path = os.path.join(out, "green.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_probes(out, rows):
    ts = _col(rows, "theta_solve")
    fd = _col(rows, "theta_fd")
    fig, ax = plt.subplots()
    ax.plot(ts, fd, "o", ms=3, label="finite differences")
    fk = np.array([float(v) if v not in ("", "nan") else np.nan for v in (r["theta_fk"] for r in rows)])
    if np.any(np.isfinite(fk)):
        se = np.array([float(r["fk_stderr"]) for r in rows])
        ok = np.isfinite(fk)
        ax.errorbar(ts[ok], fk[ok], yerr=3 * se[ok], fmt="s", ms=3, capsize=2, label="random walk (3 se)")
    lim = [0, max(ts.max(), 1e-12) * 1.05]
    ax.plot(lim, lim, "k:", lw=0.8)
    ax.set_xlabel("linearized solve")
    ax.set_ylabel("oracle")
    ax.legend()
    path = os.path.join(out, "probes.png")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render(out_dir: str) -> list[str]:
    """Render every figure whose CSV exists in ``out_dir``; returns written paths."""
    import json

    def load_json(name):
        p = os.path.join(out_dir, name)
        return json.load(open(p)) if os.path.exists(p) else None

    made = []
    with plt.rc_context(RC):
        for name, fn in (("decay.csv", lambda r: plot_decay(out_dir, r, load_json("decay_fit.json"))),
                         ("decay_control.csv",
                          lambda r: plot_decay(out_dir, r, load_json("decay_control_fit.json"), "decay_control")),
                         ("coupling.csv", lambda r: plot_coupling(out_dir, r, load_json("coupling_fit.json"))),
                         ("kernel.csv", lambda r: plot_kernel(out_dir, r)),
                         ("green.csv", lambda r: plot_green(out_dir, r)),
                         ("probes.csv", lambda r: plot_probes(out_dir, r))):
            p = os.path.join(out_dir, name)
            if os.path.exists(p):
                rows = read_csv(p)
                if rows:
                    made.append(fn(rows))
    return made
