"""Regression, discrimination, calibration, and risk-bin-stratified
classification metrics, plus percentile-bootstrap confidence intervals."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .labels import DataError, RiskBin, risk_bin

N_RELIABILITY_BINS = 10


def _vec(values, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    return arr


def _pair(pred, target):
    p = _vec(pred, "pred")
    t = _vec(target, "target")
    if p.size != t.size:
        raise DataError(f"length mismatch: {p.size} predictions vs "
                        f"{t.size} targets")
    return p, t


def _positives(label):
    """Binary outcome from a soft or hard label: positive iff > 0.5."""
    return _vec(label, "label") > 0.5


def regression_metrics(pred, target):
    """mse, mae, r2 (= 1 - SS_res/SS_tot), and Pearson correlation.

    A constant target leaves both r2 and pearson undefined and is an
    error; constant predictions only lose pearson, reported as None.
    """
    p, t = _pair(pred, target)
    err = p - t
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise DataError("constant target: r2 and pearson are undefined")
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot
    sp = float(p.std())
    if sp == 0.0:
        pearson = None
    else:
        cov = float(np.mean((p - p.mean()) * (t - t.mean())))
        pearson = cov / (sp * float(t.std()))
    return {"mse": mse, "mae": mae, "r2": r2, "pearson": pearson}


def auroc(pred, label):
    """Probability that a random positive outranks a random negative.

    Mann-Whitney form on average ranks, so tied scores earn half credit.
    ``label`` may be soft; positives are label > 0.5.
    """
    p, _ = _pair(pred, label)
    pos = _positives(label)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auroc needs both classes present")
    ranks = rankdata(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def brier_and_reliability(pred, label):
    """Brier score plus an equal-frequency decile reliability table.

    Rows are (mean predicted probability, empirical positive fraction,
    count) over 10 equal-count bins of the sorted predictions (counts
    differ by at most one; empty bins on tiny inputs are dropped).
    """
    p, _ = _pair(pred, label)
    if ((p < 0.0) | (p > 1.0)).any():
        raise DataError("predictions must lie in [0, 1]")
    y = _positives(label).astype(np.float64)
    brier = float(np.mean((p - y) ** 2))
    order = np.argsort(p, kind="stable")
    rows = []
    for chunk in np.array_split(order, N_RELIABILITY_BINS):
        if chunk.size == 0:
            continue
        rows.append((float(p[chunk].mean()), float(y[chunk].mean()),
                     int(chunk.size)))
    return brier, rows


def stratified_sens_spec(pred, target):
    """One-vs-rest sensitivity/specificity per risk bin.

    Each sample gets a true bin from the target posterior and a predicted
    bin from the predicted posterior. For bin b, sensitivity is the
    fraction of true-b samples predicted b; specificity is the fraction of
    non-b samples predicted non-b. Bins with no true members are absent,
    and a bin covering the whole cohort reports specificity None. Balanced
    accuracy averages the sensitivities that are present.
    """
    p, t = _pair(pred, target)
    pred_bins = np.array([risk_bin(v) for v in p], dtype=object)
    true_bins = np.array([risk_bin(v) for v in t], dtype=object)
    bins = {}
    sens_values = []
    for b in RiskBin:
        is_true = true_bins == b
        n_true = int(is_true.sum())
        if n_true == 0:
            continue
        is_pred = pred_bins == b
        sens = float((is_pred & is_true).sum() / n_true)
        n_rest = p.size - n_true
        spec = (float((~is_pred & ~is_true).sum() / n_rest)
                if n_rest else None)
        bins[b.value] = {"sensitivity": sens, "specificity": spec,
                         "count": n_true}
        sens_values.append(sens)
    return bins, float(np.mean(sens_values))


def bootstrap_ci(metric_fn, pred, target, n=10000, level=0.95, seed=0):
    """Percentile bootstrap interval for metric_fn(pred, target).

    Resamples records with replacement; a resample on which the metric is
    undefined (raises ValueError) is redrawn, up to 10n attempts total.
    """
    if n < 100:
        raise ValueError(f"n = {n} too small for a percentile interval")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level {level} outside (0, 1)")
    p, t = _pair(pred, target)
    rng = np.random.default_rng(seed)
    values = np.empty(n, dtype=np.float64)
    got = 0
    for _ in range(10 * n):
        if got == n:
            break
        idx = rng.integers(0, p.size, size=p.size)
        try:
            values[got] = float(metric_fn(p[idx], t[idx]))
        except ValueError:
            continue
        got += 1
    if got < n:
        raise DataError(f"metric undefined on too many resamples "
                        f"({got}/{n} succeeded within {10 * n} attempts)")
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


__all__ = [
    "N_RELIABILITY_BINS", "auroc", "bootstrap_ci", "brier_and_reliability",
    "regression_metrics", "stratified_sens_spec",
]
