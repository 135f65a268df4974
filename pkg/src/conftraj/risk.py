"""Uncertainty-calibrated risk stratification.

Two per-subject risk scores over a horizon [t0, tN]: the predicted rate
of change (prediction at tN minus observed baseline, per month) and its
high-confidence worst-case counterpart, which replaces the prediction
with the band endpoint in the progression direction.  Subjects are
classified as high-risk by thresholding the z-standardized score at the
Youden-optimal threshold, and evaluated with standard classification
metrics, bootstrap confidence intervals, and threshold-free AUCs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conformal import band_for_subject
from .data_model import Dataset
from .errors import ConfigurationError, DataError

PROGRESSOR = "progressor"
STABLE = "stable"


@dataclass(frozen=True)
class RiskRecord:
    subject_id: str
    t0: int
    tN: int
    y_t0: float
    roc_hat: float
    rocb: float          # nan when the band is infinite
    label: str
    direction: str


@dataclass(frozen=True)
class ClassificationReport:
    score_name: str
    tau_star: float
    precision: float
    recall: float
    f1: float
    balanced_accuracy: float
    ci_95: dict
    roc_auc: float
    pr_auc: float
    n: int
    n_excluded: int = 0


def roc_hat(y_t0: float, y_hat_tN: float, t0: int, tN: int) -> float:
    """Predicted rate of change per month over [t0, tN]."""
    if tN <= t0:
        raise ConfigurationError(f"horizon tN={tN} must exceed t0={t0}")
    return (y_hat_tN - y_t0) / (tN - t0)


def rocb(y_t0: float, band_at_tN, t0: int, tN: int, direction: str) -> float:
    """Worst-case rate of change using the band endpoint at tN."""
    if tN <= t0:
        raise ConfigurationError(f"horizon tN={tN} must exceed t0={t0}")
    lower, upper = band_at_tN
    if not (math.isfinite(lower) and math.isfinite(upper)):
        raise DataError("rate-of-change bound undefined on an infinite band")
    if lower > upper:
        raise DataError(f"band lower {lower} exceeds upper {upper}")
    if direction == "decreasing":
        return (lower - y_t0) / (tN - t0)
    if direction == "increasing":
        return (upper - y_t0) / (tN - t0)
    raise ConfigurationError(f"unknown direction {direction!r}")


def _flags(scores, tau, rule):
    scores = np.asarray(scores, dtype=float)
    if rule == "le":
        return scores <= tau
    if rule == "ge":
        return scores >= tau
    raise ConfigurationError(f"unknown high-risk rule {rule!r}")


def _positives(labels):
    return np.asarray([lab == PROGRESSOR for lab in labels])


def classify_metrics(scores, labels, tau, rule="le"):
    """Confusion-matrix metrics with progressors as the positive class."""
    flagged = _flags(scores, tau, rule)
    pos = _positives(labels)
    tp = int(np.sum(flagged & pos))
    fp = int(np.sum(flagged & ~pos))
    fn = int(np.sum(~flagged & pos))
    tn = int(np.sum(~flagged & ~pos))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    specificity = tn / (tn + fp) if tn + fp else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "balanced_accuracy": 0.5 * (recall + specificity)}


def youden_threshold(scores, labels, rule="le"):
    """Threshold maximizing J = sensitivity + specificity - 1.

    Candidates are the distinct score values plus the flag-nothing
    extreme; ties break toward the most specific classifier (smallest tau
    under the <=-rule, largest under the >=-rule).
    """
    pos = _positives(labels)
    if pos.all() or not pos.any():
        raise DataError("Youden threshold needs both classes present")
    extreme = -math.inf if rule == "le" else math.inf
    candidates = sorted(set(float(v) for v in scores)) + [extreme]
    best_tau, best_j = None, -math.inf
    for tau in candidates:
        flagged = _flags(scores, tau, rule)
        sens = np.sum(flagged & pos) / np.sum(pos)
        spec = np.sum(~flagged & ~pos) / np.sum(~pos)
        j = sens + spec - 1.0
        if j > best_j + 1e-12:
            best_tau, best_j = tau, j
        elif abs(j - best_j) <= 1e-12 and best_tau is not None:
            if (tau < best_tau) if rule == "le" else (tau > best_tau):
                best_tau = tau
    return best_tau


def bootstrap_ci(scores, labels, tau, rule="le", B=2000, level=0.95, seed=0):
    """Percentile bootstrap CIs for the metrics at a fixed threshold.

    Replicates that resample a single class are skipped; the skip count
    is reported under "n_skipped".
    """
    scores = np.asarray(scores, dtype=float)
    labels = list(labels)
    rng = np.random.default_rng(seed)
    samples: dict = {m: [] for m in ("precision", "recall", "f1", "balanced_accuracy")}
    skipped = 0
    n = len(scores)
    for _ in range(B):
        pick = rng.integers(0, n, size=n)
        lab = [labels[i] for i in pick]
        if len(set(lab)) < 2:
            skipped += 1
            continue
        for m, v in classify_metrics(scores[pick], lab, tau, rule).items():
            samples[m].append(v)
    lo = (1.0 - level) / 2.0
    out = {m: (float(np.percentile(v, 100 * lo)),
               float(np.percentile(v, 100 * (1.0 - lo))))
           for m, v in samples.items()}
    out["n_skipped"] = skipped
    return out


def threshold_free(scores, labels, rule="le"):
    """(ROC-AUC, PR-AUC) oriented so the high-risk rule scores positives higher."""
    scores = np.asarray(scores, dtype=float)
    pos = _positives(labels)
    if pos.all() or not pos.any():
        raise DataError("AUC needs both classes present")
    decision = -scores if rule == "le" else scores

    # ROC-AUC as the rank statistic; ties contribute 1/2 via midranks.
    order = np.argsort(decision, kind="mergesort")
    ranks = np.empty(len(decision))
    sorted_d = decision[order]
    i = 0
    while i < len(sorted_d):
        j = i
        while j + 1 < len(sorted_d) and sorted_d[j + 1] == sorted_d[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos, n_neg = int(np.sum(pos)), int(np.sum(~pos))
    roc_auc = (float(np.sum(ranks[pos])) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # PR-AUC by precision-recall step integration over descending thresholds.
    desc = np.argsort(-decision, kind="mergesort")
    tp = fp = 0
    prev_recall = 0.0
    pr_auc = 0.0
    k = 0
    while k < len(desc):
        j = k
        while j + 1 < len(desc) and decision[desc[j + 1]] == decision[desc[k]]:
            j += 1
        tp += int(np.sum(pos[desc[k:j + 1]]))
        fp += (j - k + 1) - int(np.sum(pos[desc[k:j + 1]]))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        pr_auc += (recall - prev_recall) * precision
        prev_recall = recall
        k = j + 1
    return roc_auc, pr_auc


def _zstandardize(values):
    v = np.asarray(values, dtype=float)
    std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    if std <= 0:
        return v - float(np.mean(v)) if len(v) else v
    return (v - float(np.mean(v))) / std


def _score_report(name, values, labels, rule, bootstrap_B, seed, n_excluded):
    z = _zstandardize(values)
    tau = youden_threshold(z, labels, rule)
    metrics = classify_metrics(z, labels, tau, rule)
    ci = bootstrap_ci(z, labels, tau, rule, B=bootstrap_B, seed=seed)
    auc, pr = threshold_free(z, labels, rule)
    return ClassificationReport(name, tau, metrics["precision"], metrics["recall"],
                                metrics["f1"], metrics["balanced_accuracy"], ci,
                                auc, pr, len(labels), n_excluded)


def risk_pipeline(test: Dataset, truth: dict, model, cal, direction: str,
                  bootstrap_B: int = 2000, seed: int = 0):
    """Risk scores and Youden-threshold classification reports for a cohort.

    truth maps subject_id -> {"is_progressor": bool, ...}; the scoring
    horizon tN is each subject's last observed visit.  Returns
    (records, {"roc_hat": report, "rocb": report}).
    """
    rule = "le" if direction == "decreasing" else "ge"
    records = []
    for s in test.scored_subjects():
        if s.subject_id not in truth:
            raise DataError(f"no progression label for subject {s.subject_id}")
        label = PROGRESSOR if truth[s.subject_id]["is_progressor"] else STABLE
        tN = s.visit_times[-1]
        band = band_for_subject(model, s, cal, [tN])
        center = band.center_at(tN)
        rh = roc_hat(s.baseline_value, center, 0, tN)
        if band.finite:
            r = band.radius_at(tN)
            rb = rocb(s.baseline_value, (center - r, center + r), 0, tN, direction)
        else:
            rb = math.nan
        records.append(RiskRecord(s.subject_id, 0, tN, s.baseline_value,
                                  rh, rb, label, direction))

    labels_all = [r.label for r in records]
    reports = {"roc_hat": _score_report(
        "roc_hat", [r.roc_hat for r in records], labels_all, rule,
        bootstrap_B, seed, 0)}

    finite = [r for r in records if math.isfinite(r.rocb)]
    if not finite:
        raise DataError("every test band is infinite; the worst-case "
                        "rate-of-change score is undefined")
    reports["rocb"] = _score_report(
        "rocb", [r.rocb for r in finite], [r.label for r in finite], rule,
        bootstrap_B, seed, len(records) - len(finite))
    return records, reports
