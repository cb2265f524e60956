"""SVG figures for a run record."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import koopman_vs_rls  # noqa: E402
from .scenario import PARAM_COLS, S_DELTA, S_P, S_PHAT, S_VERR  # noqa: E402

log = logging.getLogger(__name__)

VEL_LABELS = ("u", "v", "w", "p", "q", "r")
ACT_LABELS = ("elevator", "rudder", "aileron", "throttle")


def _save(fig, path):
    # fixed hash salt and no date keep the SVG bytes reproducible
    with matplotlib.rc_context({"svg.hashsalt": "dacsim"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _events(ax, record):
    for time, kind, _ in record.events:
        ax.axvline(time, color="0.6", lw=0.8, ls=":")


def plot_velocity_error(record, path):
    t, e = record.t, record.data[:, S_VERR]
    fig, axes = plt.subplots(2, 1, sharex=True, figsize=(8, 5))
    for i in range(3):
        axes[0].plot(t, e[:, i], lw=0.8, label=VEL_LABELS[i])
        axes[1].plot(t, e[:, 3 + i], lw=0.8, label=VEL_LABELS[3 + i])
    axes[0].set_ylabel("ft/s")
    axes[1].set_ylabel("rad/s")
    axes[1].set_xlabel("t [s]")
    for ax in axes:
        _events(ax, record)
        ax.legend(loc="upper right", fontsize=7)
    axes[0].set_title(f"velocity tracking error ({record.mode})")
    return _save(fig, path)


def plot_lambda(record, path):
    t = record.t
    fig, ax = plt.subplots(figsize=(8, 3))
    for name in ("lambda_actual", "lambda_opt", "lambda_sel"):
        ax.plot(t, record.col(name), lw=1.0, label=name)
    _events(ax, record)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("t [s]")
    ax.legend(loc="lower right", fontsize=7)
    ax.set_title("decision factor")
    return _save(fig, path)


def plot_deflections(record, path):
    t, d = record.t, record.data[:, S_DELTA]
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for i in range(d.shape[1]):
        ax.plot(t, d[:, i], lw=0.8, label=ACT_LABELS[i])
    _events(ax, record)
    ax.set_xlabel("t [s]")
    ax.legend(loc="upper right", fontsize=7)
    ax.set_title("actuator commands")
    return _save(fig, path)


def plot_estimation(record, path, names=("m", "Ixx", "Iyy", "Izz")):
    t = record.t
    p, phat = record.data[:, S_P], record.data[:, S_PHAT]
    fig, axes = plt.subplots(len(names), 1, sharex=True, figsize=(8, 1.8 * len(names)))
    for ax, name in zip(np.atleast_1d(axes), names):
        j = PARAM_COLS.index(name)
        ax.plot(t, p[:, j], "k--", lw=0.8, label="truth")
        ax.plot(t, phat[:, j], lw=1.0, label="estimate")
        ax.set_ylabel(name)
        _events(ax, record)
    np.atleast_1d(axes)[0].legend(loc="upper right", fontsize=7)
    np.atleast_1d(axes)[-1].set_xlabel("t [s]")
    return _save(fig, path)


def plot_observability(record, path):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    if record.obs_sv:
        t = np.array([s[0] for s in record.obs_sv])
        sv = np.array([s[1] for s in record.obs_sv])
        floor = np.finfo(float).tiny
        ax.semilogy(t, np.maximum(sv, floor), lw=0.6, color="C0")
    ax.set_xlabel("t [s]")
    ax.set_title("observability singular values")
    return _save(fig, path)


def plot_identifier(record, path):
    pairs = koopman_vs_rls(record, after=0.0)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    if pairs:
        t, k, r = (np.array(x) for x in zip(*pairs))
        ax.plot(t, k, "o-", ms=3, lw=1.0, label="Koopman batch")
        ax.plot(t, r, "s-", ms=3, lw=1.0, label="RLS")
        ax.legend(loc="upper right", fontsize=7)
    _events(ax, record)
    ax.set_xlabel("window end [s]")
    ax.set_ylabel("reconstruction residual RMS")
    return _save(fig, path)


FIGURES = {
    "velocity_error": plot_velocity_error,
    "lambda": plot_lambda,
    "deflections": plot_deflections,
    "estimation": plot_estimation,
    "observability": plot_observability,
    "identifier_residuals": plot_identifier,
}


def emit_plots(record, outdir):
    """Write one SVG per entry of :data:`FIGURES`; returns the paths."""
    if len(record) == 0:
        log.warning("empty record, no plots written")
        return []
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return [fn(record, outdir / f"{name}.svg") for name, fn in FIGURES.items()]
