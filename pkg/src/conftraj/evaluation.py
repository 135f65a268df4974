"""Coverage / interval-width evaluation protocol.

A test subject counts as covered when every observed visit lies inside
the band (closed intervals).  Widths (2 * radius) are averaged over all
finite-band (subject, visit) pairs; infinite bands count toward coverage
but are excluded from width statistics with a reported count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .conformal import (CalibrationResult, GroupCalibration, PredictionBand,
                        band_for_subject, bands_for_dataset, calibrate,
                        mondrian_calibrate, score_dataset)
from .data_model import Dataset, split, standardize
from .errors import ConfigurationError, DataError
from .predictors import (fit_bootstrap, fit_gp, fit_quantile,
                         predict_trajectory, subject_row)

PREDICTOR_KINDS = ("gp", "quantile", "bootstrap")


def fit_predictor(kind: str, train: Dataset, seed: int = 0, **opts):
    if kind == "gp":
        return fit_gp(train, seed=seed, **opts)
    if kind == "quantile":
        return fit_quantile(train, **opts)
    if kind == "bootstrap":
        return fit_bootstrap(train, seed=seed, **opts)
    raise ConfigurationError(f"unknown predictor kind {kind!r}")


@dataclass(frozen=True)
class EvalReport:
    mean_coverage: float
    mean_width: float
    n_test: int
    n_infinite_bands: int
    per_time_width: dict
    per_group: dict | None = None

    def metrics(self):
        return {"coverage": self.mean_coverage, "width": self.mean_width}


@dataclass(frozen=True)
class MultiSplitReport:
    reports: tuple
    mean: dict
    p95: dict
    deviation_p95: dict


def baseline_band(model, x, times, alpha: float, subject_id: str = "") -> PredictionBand:
    """Non-conformal comparison band: center +/- z_{1-alpha/2} * sigma."""
    z = NormalDist().inv_cdf(1.0 - alpha / 2.0)
    preds = predict_trajectory(model, x, times)
    return PredictionBand(subject_id, tuple(times),
                          tuple(p.mean for p in preds),
                          tuple(z * p.std for p in preds), True)


def _subject_covered(band: PredictionBand, s):
    if not band.finite:
        return True
    for t, y in s.visits:
        if t not in band.times:
            raise DataError(f"band for {s.subject_id} missing visit time {t}")
        if abs(y - band.center_at(t)) > band.radius_at(t):
            return False
    return True


def coverage_and_width(bands, test: Dataset, bucket_months: int = 12,
                       grouping_column: str | None = None) -> EvalReport:
    """Evaluate one band per test subject at that subject's visit times."""
    subjects = test.scored_subjects()
    by_id = {b.subject_id: b for b in bands}
    covered = 0
    n_inf = 0
    widths = []
    bucket_widths: dict = {}
    group_stats: dict = {}
    for s in subjects:
        band = by_id.get(s.subject_id)
        if band is None:
            raise DataError(f"no band for test subject {s.subject_id}")
        ok = _subject_covered(band, s)
        covered += ok
        if grouping_column is not None:
            g = s.group_labels.get(grouping_column)
            cov_list, w_list = group_stats.setdefault(g, ([], []))
            cov_list.append(ok)
        if not band.finite:
            n_inf += 1
            continue
        for t, _ in s.visits:
            w = 2.0 * band.radius_at(t)
            widths.append(w)
            bucket_widths.setdefault((t - 1) // bucket_months, []).append(w)
            if grouping_column is not None:
                group_stats[s.group_labels.get(grouping_column)][1].append(w)

    per_group = None
    if grouping_column is not None:
        per_group = {
            g: {"coverage": float(np.mean(cov)),
                "width": float(np.mean(w)) if w else math.nan,
                "n": len(cov)}
            for g, (cov, w) in group_stats.items()}
    return EvalReport(
        mean_coverage=covered / len(subjects) if subjects else math.nan,
        mean_width=float(np.mean(widths)) if widths else math.nan,
        n_test=len(subjects),
        n_infinite_bands=n_inf,
        per_time_width={b: float(np.mean(w)) for b, w in sorted(bucket_widths.items())},
        per_group=per_group)


def width_over_time(bands, test: Dataset, bucket_months: int = 12) -> dict:
    """Mean width per year-bucket floor((t-1)/bucket); empty buckets omitted."""
    return coverage_and_width(bands, test, bucket_months).per_time_width


def evaluate_split(ds: Dataset, predictor_kind: str, alpha: float,
                   test_frac: float, calib_frac: float, seed: int,
                   group_by: str | None = None, mode: str = "conformal",
                   predictor_opts: dict | None = None):
    """Run one standardize / fit / calibrate / evaluate pass.

    Returns (EvalReport, calibration or None, fitted model).
    """
    idx = split(ds, test_frac, calib_frac, seed)
    train = ds.subset(idx.train)
    train_std, stats = standardize(train)
    calib_std, _ = standardize(ds.subset(idx.calib), stats)
    test_std, _ = standardize(ds.subset(idx.test), stats)

    model = fit_predictor(predictor_kind, train_std, seed=seed,
                          **(predictor_opts or {}))
    cal = None
    bands = []
    if mode == "conformal":
        scores = score_dataset(model, calib_std)
        if group_by is None:
            cal = calibrate(scores, alpha)
        else:
            cal = mondrian_calibrate(calib_std, scores, group_by, alpha)
        bands = bands_for_dataset(model, test_std, cal)
    elif mode == "baseline":
        for s in test_std.scored_subjects():
            bands.append(baseline_band(model, subject_row(s), s.visit_times,
                                       alpha, subject_id=s.subject_id))
    else:
        raise ConfigurationError(f"unknown evaluation mode {mode!r}")
    report = coverage_and_width(bands, test_std, grouping_column=group_by)
    return report, cal, model


def run_protocol(ds: Dataset, predictor_kind: str, alpha: float,
                 n_splits: int = 10, test_frac: float = 0.10,
                 calib_frac: float = 0.20, seed: int = 0,
                 group_by: str | None = None, mode: str = "conformal",
                 predictor_opts: dict | None = None) -> MultiSplitReport:
    """Multi-split evaluation with mean and 95th-percentile aggregation."""
    rng = np.random.default_rng(seed)
    split_seeds = rng.integers(0, 2 ** 31 - 1, size=n_splits)
    reports = []
    for k, s in enumerate(split_seeds):
        try:
            report, _, _ = evaluate_split(ds, predictor_kind, alpha, test_frac,
                                          calib_frac, int(s), group_by, mode,
                                          predictor_opts)
        except Exception as exc:
            raise type(exc)(f"split {k}: {exc}") from exc
        reports.append(report)

    per_metric = {m: np.asarray([r.metrics()[m] for r in reports])
                  for m in ("coverage", "width")}
    mean = {m: float(np.nanmean(v)) for m, v in per_metric.items()}
    p95 = {m: float(np.nanpercentile(v, 95)) for m, v in per_metric.items()}
    dev = {m: float(np.nanpercentile(np.abs(v - mean[m]), 95))
           for m, v in per_metric.items()}
    return MultiSplitReport(tuple(reports), mean, p95, dev)


def sweep_calibration_fraction(ds: Dataset, predictor_kind: str, alpha: float,
                               fracs=None, seed: int = 0, test_frac: float = 0.10,
                               predictor_opts: dict | None = None):
    """Coverage / width per calibration fraction on a fixed validation split."""
    if fracs is None:
        fracs = [0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30]
    rows = []
    for frac in fracs:
        report, _, _ = evaluate_split(ds, predictor_kind, alpha, test_frac, frac,
                                      seed, predictor_opts=predictor_opts)
        rows.append({"calib_frac": frac, "coverage": report.mean_coverage,
                     "width": report.mean_width,
                     "n_infinite_bands": report.n_infinite_bands})
    return rows


def stratified_compare(ds: Dataset, predictor_kind: str, alpha: float,
                       grouping_column: str, seed: int = 0,
                       test_frac: float = 0.10, calib_frac: float = 0.20,
                       predictor_opts: dict | None = None):
    """Population vs Mondrian calibration from the same fitted model,
    evaluated per test group."""
    idx = split(ds, test_frac, calib_frac, seed)
    train_std, stats = standardize(ds.subset(idx.train))
    calib_std, _ = standardize(ds.subset(idx.calib), stats)
    test_std, _ = standardize(ds.subset(idx.test), stats)

    model = fit_predictor(predictor_kind, train_std, seed=seed,
                          **(predictor_opts or {}))
    scores = score_dataset(model, calib_std)
    pop_cal = calibrate(scores, alpha)
    grp_cal = mondrian_calibrate(calib_std, scores, grouping_column, alpha)

    results = {}
    for name, cal in (("population", pop_cal), ("group_conditional", grp_cal)):
        bands = bands_for_dataset(model, test_std, cal)
        report = coverage_and_width(bands, test_std, grouping_column=grouping_column)
        results[name] = report
    return results
