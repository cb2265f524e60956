"""Summary metrics over a :class:`~dacsim.scenario.RunRecord`."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .scenario import COL, PARAM_COLS, S_PHAT, S_P, S_VERR

# relative bands used for the convergence times
DEFAULT_BANDS = {"m": 0.02, "Iyy": 0.05}


def rms(e):
    """Root mean square of the Euclidean norm of the rows of ``e``.

    A 1-D input is treated as a single channel.
    """
    e = np.asarray(e, float)
    if e.size == 0:
        return float("nan")
    if e.ndim == 1:
        e = e[:, None]
    return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))


def window_rms(t, e, start, end):
    """RMS over samples with ``start <= t <= end``."""
    t = np.asarray(t)
    sel = (t >= start) & (t <= end)
    return rms(np.asarray(e)[sel])


def sliding_rms(t, e, width, step=None, start=None, end=None):
    """``(starts, values)`` for windows ``[s, s + width)`` stepped by ``step``."""
    t = np.asarray(t)
    e = np.asarray(e, float)
    step = width if step is None else step
    start = t[0] if start is None else start
    end = t[-1] if end is None else end
    starts = np.arange(start, end - width + 1e-9, step)
    vals = np.array([rms(e[(t >= s) & (t < s + width)]) for s in starts])
    return starts, vals


def phases(record):
    """``[(label, start, end)]`` split at the fired events."""
    t = record.t
    if len(t) == 0:
        return []
    cuts = [(0.0, "start")]
    for time, kind, _ in record.events:
        if time > cuts[-1][0]:
            cuts.append((time, kind))
        else:
            cuts[-1] = (cuts[-1][0], cuts[-1][1] + "+" + kind)
    ends = [c[0] for c in cuts[1:]] + [float(t[-1])]
    return [(label, start, end) for (start, label), end in zip(cuts, ends)]


def damage_time(record):
    for time, kind, _ in record.events:
        if kind == "damage":
            return float(time)
    return None


def convergence_time(t, est, truth, band, t0=0.0):
    """Seconds after ``t0`` from which ``|est - truth| <= band * |truth|`` holds to the end.

    ``nan`` when the estimate is outside the band at the final sample.
    """
    t = np.asarray(t)
    sel = t >= t0
    inside = np.abs(np.asarray(est)[sel] - np.asarray(truth)[sel]) <= band * np.abs(np.asarray(truth)[sel])
    if inside.size == 0 or not inside[-1]:
        return float("nan")
    outside = np.flatnonzero(~inside)
    first = 0 if outside.size == 0 else outside[-1] + 1
    return float(t[sel][first] - t0)


def lambda_segments(t, lam, settle=0.5):
    """Spans ``(start, end)`` over which ``lam`` changes.

    Pauses shorter than ``settle`` seconds are merged into one span.
    """
    t = np.asarray(t)
    lam = np.asarray(lam)
    moving = np.flatnonzero(np.diff(lam) != 0)
    if moving.size == 0:
        return []
    spans = []
    s = e = moving[0]
    for i in moving[1:]:
        if t[i] - t[e + 1] > settle:
            spans.append((float(t[s]), float(t[e + 1])))
            s = i
        e = i
    spans.append((float(t[s]), float(t[e + 1])))
    return spans


def ramp_excursion(t, e, start, end, width=2.0, step=0.1):
    """``(pre, peak)`` windowed RMS around a λ ramp over ``[start, end]``.

    ``pre`` is the RMS over the ``width`` seconds before ``start``; ``peak``
    is the largest RMS over windows of the same width that start inside the
    ramp.
    """
    pre = window_rms(t, e, start - width, start)
    starts = np.arange(start, max(end - width, start) + 1e-9, step)
    peak = max(rms(np.asarray(e)[(t >= s) & (t < s + width)]) for s in starts)
    return pre, peak


def koopman_vs_rls(record, after=32.0, width=2.0):
    """Residual pairs ``(t, koopman_rms, rls_rms)`` for back-to-back windows ending after ``after + width``.

    ``koopman_rms`` is the plain window fit (no shrinkage toward the nominal model).
    """
    out = []
    for fit in record.fits:
        t_fit, rms_k, rms_r = fit[0], fit[7], fit[5]
        k = (t_fit - after) / width
        if t_fit >= after + width - 1e-9 and abs(k - round(k)) < 1e-6:
            out.append((t_fit, rms_k, rms_r))
    return out


def summarize(record, windows=((20.0, 30.0),), bands=None):
    """Ordered ``{key: value}`` of scalar metrics."""
    bands = DEFAULT_BANDS if bands is None else bands
    out = {"mode": record.mode, "scenario": record.scenario, "seed": record.seed, "samples": len(record)}
    if len(record) == 0:
        return out
    t = record.t
    verr = record.data[:, S_VERR]
    out["rms_verr.total"] = rms(verr)
    for i in range(6):
        out[f"rms_verr.channel_{i}"] = rms(verr[:, i])
    for i, (label, start, end) in enumerate(phases(record)):
        out[f"phase.{i}.label"] = label
        out[f"phase.{i}.start"] = start
        out[f"phase.{i}.end"] = end
        out[f"phase.{i}.rms_verr"] = window_rms(t, verr, start, end)
    for start, end in windows:
        out[f"window.{start:g}_{end:g}.rms_verr"] = window_rms(t, verr, start, end)

    t_dmg = damage_time(record)
    p, phat = record.data[:, S_P], record.data[:, S_PHAT]
    for name, band in bands.items():
        j = PARAM_COLS.index(name)
        key = f"convergence.{name}"
        out[key] = convergence_time(t, phat[:, j], p[:, j], band, 0.0 if t_dmg is None else t_dmg)
        out[f"final_rel_error.{name}"] = float(abs(phat[-1, j] - p[-1, j]) / abs(p[-1, j]))

    lam = record.data[:, COL["lambda_actual"]]
    out["lambda.mean"] = float(np.mean(lam))
    out["lambda.max"] = float(np.max(lam))
    out["lambda.max_step"] = float(np.max(np.abs(np.diff(lam)))) if len(lam) > 1 else 0.0
    hit = np.flatnonzero(lam >= 0.9)
    out["lambda.first_above_0.9"] = float(t[hit[0]]) if hit.size else float("nan")
    for i, (s, e) in enumerate(lambda_segments(t, lam)):
        pre, peak = ramp_excursion(t, verr, s, e)
        out[f"ramp.{i}.start"] = s
        out[f"ramp.{i}.end"] = e
        out[f"ramp.{i}.ratio"] = peak / pre if pre > 0 else float("nan")

    for name in ("fit_rms", "koopman_rms", "rls_rms"):
        col = record.data[:, COL[name]]
        out[f"identifier.{name}.mean"] = float(np.nanmean(col)) if np.isfinite(col).any() else float("nan")
    pairs = koopman_vs_rls(record)
    out["identifier.windows"] = len(pairs)
    out["identifier.koopman_le_rls_fraction"] = (
        float(np.mean([k <= r for _, k, r in pairs])) if pairs else float("nan"))
    out["alloc_fail.steps"] = int(np.sum(record.data[:, COL["alloc_fail"]]))
    out["saturated.steps"] = int(np.sum(record.data[:, COL["saturated"]]))
    return out


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_kv(metrics, path):
    """One ``key=value`` line per metric in insertion order."""
    Path(path).write_text("".join(f"{k}={_fmt(v)}\n" for k, v in metrics.items()))


def read_kv(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def compare(mbc, dac, windows=((20.0, 30.0),)):
    """Paired metrics: per-window RMS for both modes and their ratio."""
    out = {}
    for start, end in windows:
        a = window_rms(mbc.t, mbc.data[:, S_VERR], start, end)
        b = window_rms(dac.t, dac.data[:, S_VERR], start, end)
        key = f"window.{start:g}_{end:g}"
        out[f"{key}.rms_verr.mbc"] = a
        out[f"{key}.rms_verr.dac"] = b
        out[f"{key}.ratio_dac_mbc"] = b / a if a > 0 else float("nan")
    out["rms_verr.total.mbc"] = rms(mbc.data[:, S_VERR])
    out["rms_verr.total.dac"] = rms(dac.data[:, S_VERR])
    return out
