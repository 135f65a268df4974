"""Nonconformity scoring, conformal radius calibration, and prediction bands.

The per-subject score is the worst normalized residual over that
subject's visits, max_t |y_t - yhat_t| / sigma(yhat_t).  The conformal
radius is the ceil((n+1)(1-alpha))-th smallest calibration score, with
the score multiset augmented by +infinity; when the rank exceeds n the
radius is infinite and the band covers everything.  Group-conditional
(Mondrian) calibration applies the same rule within each category of a
grouping column.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset, SubjectRecord
from .errors import ConfigurationError, DataError
from .predictors import predict_batch, predict_trajectory, subject_row

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NonconformityScore:
    subject_id: str
    value: float

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value >= 0):
            raise DataError(f"score for {self.subject_id} must be finite and >= 0")


@dataclass(frozen=True)
class CalibrationResult:
    scores_sorted: tuple
    alpha: float
    rank: int
    radius: float        # math.inf when rank exceeds the score count

    @property
    def finite(self):
        return math.isfinite(self.radius)

    @property
    def n(self):
        return len(self.scores_sorted)


@dataclass(frozen=True)
class PredictionBand:
    subject_id: str
    times: tuple
    centers: tuple
    radii: tuple | None     # None iff the calibration radius was infinite
    finite: bool

    def __post_init__(self):
        if self.finite and len(self.times) != len(self.radii):
            raise DataError("band times/radii length mismatch")
        if len(self.times) != len(self.centers):
            raise DataError("band times/centers length mismatch")

    def radius_at(self, t):
        if not self.finite:
            return math.inf
        return self.radii[self.times.index(t)]

    def center_at(self, t):
        return self.centers[self.times.index(t)]


@dataclass(frozen=True)
class GroupCalibration:
    grouping_column: str
    per_group: dict          # category -> CalibrationResult
    fallback: CalibrationResult


def score_subject(s: SubjectRecord, preds) -> NonconformityScore:
    """Worst normalized residual over the subject's visits."""
    if not s.visits:
        raise DataError(f"subject {s.subject_id}: score undefined on empty visit list")
    if len(preds) != len(s.visits):
        raise DataError(f"subject {s.subject_id}: {len(preds)} predictions for "
                        f"{len(s.visits)} visits")
    ratios = [abs(y - p.mean) / p.std for (_, y), p in zip(s.visits, preds)]
    return NonconformityScore(s.subject_id, max(ratios))


def calibrate(scores, alpha: float) -> CalibrationResult:
    """Conformal radius from a list of NonconformityScores."""
    if not 0 < alpha < 1:
        raise ConfigurationError(f"alpha must be in (0,1), got {alpha}")
    values = sorted(s.value for s in scores)
    n = len(values)
    rank = math.ceil((n + 1) * (1.0 - alpha))
    radius = values[rank - 1] if rank <= n else math.inf
    return CalibrationResult(tuple(values), alpha, rank, radius)


def _predict_visits(model, subjects):
    """Batched (means, stds) over all (subject, visit) rows, plus row offsets."""
    X, ts, offsets = [], [], [0]
    for s in subjects:
        x = subject_row(s)
        for t in s.visit_times:
            X.append(x)
            ts.append(t)
        offsets.append(len(ts))
    means, stds = predict_batch(model, np.asarray(X), np.asarray(ts, dtype=float))
    return means, stds, offsets


def score_dataset(model, calib: Dataset):
    """Nonconformity scores for every calibration subject with visits."""
    subjects = calib.scored_subjects()
    if not subjects:
        return []
    means, stds, offsets = _predict_visits(model, subjects)
    scores = []
    for i, s in enumerate(subjects):
        lo, hi = offsets[i], offsets[i + 1]
        y = np.asarray(s.visit_values)
        ratios = np.abs(y - means[lo:hi]) / stds[lo:hi]
        scores.append(NonconformityScore(s.subject_id, float(np.max(ratios))))
    return scores


def _radius_for(s, gcal, fallback):
    if isinstance(gcal, GroupCalibration):
        label = s.group_labels.get(gcal.grouping_column)
        cal = gcal.per_group.get(label)
        if cal is None:
            if not fallback:
                raise DataError(f"subject {s.subject_id}: unseen category {label!r} "
                                f"for {gcal.grouping_column!r} and fallback disabled")
            log.warning("subject %s: unseen category %r, using population radius",
                        s.subject_id, label)
            cal = gcal.fallback
        return cal
    return gcal


def bands_for_dataset(model, ds: Dataset, gcal, fallback: bool = True):
    """One band per scored subject, at that subject's visit times (batched)."""
    subjects = ds.scored_subjects()
    if not subjects:
        return []
    means, stds, offsets = _predict_visits(model, subjects)
    bands = []
    for i, s in enumerate(subjects):
        lo, hi = offsets[i], offsets[i + 1]
        cal = _radius_for(s, gcal, fallback)
        centers = tuple(float(v) for v in means[lo:hi])
        if cal.finite:
            radii = tuple(float(cal.radius * v) for v in stds[lo:hi])
            bands.append(PredictionBand(s.subject_id, tuple(s.visit_times),
                                        centers, radii, True))
        else:
            bands.append(PredictionBand(s.subject_id, tuple(s.visit_times),
                                        centers, None, False))
    return bands


def mondrian_calibrate(calib: Dataset, scores, grouping_column: str,
                       alpha: float) -> GroupCalibration:
    """Per-category conformal radii plus a whole-set fallback."""
    by_id = {s.subject_id: s for s in calib.subjects}
    groups: dict = {}
    for sc in scores:
        subj = by_id.get(sc.subject_id)
        if subj is None:
            raise DataError(f"score for unknown subject {sc.subject_id}")
        label = subj.group_labels.get(grouping_column)
        if label is None:
            raise DataError(f"subject {sc.subject_id} has no label for "
                            f"column {grouping_column!r}")
        groups.setdefault(label, []).append(sc)
    per_group = {g: calibrate(sc, alpha) for g, sc in groups.items()}
    return GroupCalibration(grouping_column, per_group, calibrate(scores, alpha))


def build_band(model, x, times, cal: CalibrationResult,
               subject_id: str = "") -> PredictionBand:
    """Band centers and radii over a query time grid for one input."""
    if len(times) == 0:
        raise DataError("band requires at least one query time")
    preds = predict_trajectory(model, x, times)
    centers = tuple(p.mean for p in preds)
    if not cal.finite:
        return PredictionBand(subject_id, tuple(times), centers, None, False)
    radii = tuple(cal.radius * p.std for p in preds)
    return PredictionBand(subject_id, tuple(times), centers, radii, True)


def band_for_subject(model, s: SubjectRecord, gcal, times,
                     fallback: bool = True) -> PredictionBand:
    """Band for a subject, selecting the group radius when gcal is Mondrian."""
    cal = _radius_for(s, gcal, fallback)
    return build_band(model, subject_row(s), times, cal, subject_id=s.subject_id)
