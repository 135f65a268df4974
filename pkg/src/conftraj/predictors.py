"""Uncertainty-aware trajectory predictors.

All predictors consume the (d+1)-vector [x; t] (covariates plus baseline,
plus a time input) and emit a Prediction (mean, std).  Three std
mechanisms are provided: an exact-inference RBF Gaussian process
(analytic posterior), linear quantile regression (quantile spread scaled
by a z-score), and a bootstrap ridge ensemble (sample std across
members).  Every predictor applies a common std floor so downstream
normalized scores stay finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .data_model import Dataset
from .errors import ConfigurationError, DataError, NumericalError

SIGMA_FLOOR = 1e-3

_JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class PredictorInput:
    x: np.ndarray   # covariates including the baseline observation
    t: int          # positive integer month

    def as_row(self):
        return np.concatenate([np.asarray(self.x, dtype=float), [float(self.t)]])


@dataclass(frozen=True)
class Prediction:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std >= SIGMA_FLOOR:
            raise NumericalError(f"prediction std {self.std} below floor {SIGMA_FLOOR}")


@dataclass(frozen=True)
class InputScaler:
    """Column-wise standardization of the [x; t] design matrix."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, Z):
        mean = Z.mean(axis=0)
        std = Z.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, Z):
        return (np.asarray(Z, dtype=float) - self.mean) / self.std


def subject_row(s):
    """Model input vector for one subject: covariates plus baseline."""
    return np.concatenate([s.features, [s.baseline_value]])


def design_matrix(train: Dataset):
    """One row [x; baseline; t] and one target per (subject, visit)."""
    rows, targets, owners = [], [], []
    for idx, s in enumerate(train.subjects):
        x = subject_row(s)
        for t, y in s.visits:
            rows.append(np.concatenate([x, [float(t)]]))
            targets.append(y)
            owners.append(idx)
    if not rows:
        raise DataError("training set has no visit rows")
    return (np.asarray(rows, dtype=float), np.asarray(targets, dtype=float),
            np.asarray(owners, dtype=int))


# ---------------------------------------------------------------------------
# Gaussian process (exact inference, RBF kernel)

@dataclass(frozen=True)
class GpModel:
    scaler: InputScaler
    Z: np.ndarray                 # standardized training inputs
    y: np.ndarray
    signal_var: float
    lengthscale: float
    noise_var: float
    L: np.ndarray                 # Cholesky factor of K + noise_var I (+ jitter)
    alpha: np.ndarray             # (K + noise_var I)^-1 y
    K_inv: np.ndarray             # (K + noise_var I)^-1, reused across queries
    log_marginal: float


def _rbf(Z1, Z2, signal_var, lengthscale):
    d2 = (np.sum(Z1 ** 2, axis=1)[:, None] + np.sum(Z2 ** 2, axis=1)[None, :]
          - 2.0 * Z1 @ Z2.T)
    np.maximum(d2, 0.0, out=d2)
    return signal_var * np.exp(-0.5 * d2 / lengthscale ** 2)


def _chol_with_jitter(A):
    for jit in _JITTERS:
        try:
            return np.linalg.cholesky(A + jit * np.eye(len(A))), jit
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("Cholesky failed at maximum jitter 1e-4")


def _gp_factor(Z, y, signal_var, lengthscale, noise_var):
    K = _rbf(Z, Z, signal_var, lengthscale)
    L, _ = _chol_with_jitter(K + noise_var * np.eye(len(Z)))
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    lml = (-0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L))))
           - 0.5 * len(y) * math.log(2.0 * math.pi))
    return L, alpha, lml


def _median_heuristic(Z, rng):
    m = min(len(Z), 256)
    sub = Z[rng.choice(len(Z), size=m, replace=False)] if len(Z) > m else Z
    d2 = (np.sum(sub ** 2, axis=1)[:, None] + np.sum(sub ** 2, axis=1)[None, :]
          - 2.0 * sub @ sub.T)
    d = np.sqrt(np.maximum(d2[np.triu_indices(m, k=1)], 0.0))
    med = float(np.median(d)) if len(d) else 1.0
    return med if med > 0 else 1.0


def fit_gp(train: Dataset, lengthscales=None, signal_vars=None, noise_vars=None,
           max_points: int = 512, seed: int = 0) -> GpModel:
    """Fit an exact RBF GP by grid search over the log marginal likelihood.

    Default grids anchor the lengthscale at the median pairwise distance
    and the variances at the target variance.  Training rows beyond
    max_points are subsampled (seeded) to keep the cubic cost bounded.
    """
    Zraw, y, _ = design_matrix(train)
    if len(y) < 2:
        raise DataError("GP fitting needs at least 2 visit rows")
    rng = np.random.default_rng(seed)
    if len(y) > max_points:
        keep = rng.choice(len(y), size=max_points, replace=False)
        Zraw, y = Zraw[keep], y[keep]
    scaler = InputScaler.fit(Zraw)
    Z = scaler.apply(Zraw)

    med = _median_heuristic(Z, rng)
    var_y = float(np.var(y))
    var_y = var_y if var_y > 0 else 1.0
    if lengthscales is None:
        lengthscales = [m * med for m in (0.5, 1.0, 2.0, 4.0)]
    if signal_vars is None:
        signal_vars = [m * var_y for m in (0.5, 1.0, 2.0)]
    if noise_vars is None:
        noise_vars = [m * var_y for m in (0.01, 0.05, 0.1, 0.25)]

    best = None
    for ls in lengthscales:
        for sv in signal_vars:
            for nv in noise_vars:
                L, alpha, lml = _gp_factor(Z, y, sv, ls, nv)
                if best is None or lml > best[0]:
                    best = (lml, sv, ls, nv, L, alpha)
    lml, sv, ls, nv, L, alpha = best
    L_inv = np.linalg.inv(L)
    K_inv = L_inv.T @ L_inv
    return GpModel(scaler, Z, y, sv, ls, nv, L, alpha, K_inv, lml)


def _gp_predict_batch(m: GpModel, Zq_raw):
    Zq = m.scaler.apply(Zq_raw)
    Ks = _rbf(m.Z, Zq, m.signal_var, m.lengthscale)
    mean = Ks.T @ m.alpha
    var = m.signal_var - np.sum(Ks * (m.K_inv @ Ks), axis=0) + m.noise_var
    std = np.sqrt(np.maximum(var, 0.0))
    return mean, np.maximum(std, SIGMA_FLOOR)


def predict_gp(m: GpModel, q: PredictorInput) -> Prediction:
    _check_dim(m.scaler, q)
    mean, std = _gp_predict_batch(m, q.as_row()[None, :])
    return Prediction(float(mean[0]), float(std[0]))


# ---------------------------------------------------------------------------
# Linear quantile regression (pinball loss, subgradient descent)

@dataclass(frozen=True)
class QuantileModel:
    scaler: InputScaler
    levels: tuple                 # strictly increasing, lo + hi == 1
    weights: np.ndarray           # (n_levels, p+1), bias last
    z_score: float


def pinball_loss(weights, Z1, y, levels):
    """Mean pinball loss summed over quantile levels; Z1 carries the bias column."""
    total = 0.0
    for w, q in zip(weights, levels):
        u = y - Z1 @ w
        total += float(np.mean(np.where(u >= 0, q * u, (q - 1.0) * u)))
    return total


def fit_quantile(train: Dataset, levels=(0.1, 0.5, 0.9), steps: int = 600,
                 learning_rate: float = 0.1) -> QuantileModel:
    """Minimize mean pinball loss by full-batch subgradient descent.

    Starts from zero weights; an update that increases the loss is
    reverted and the step size halved, so the recorded loss sequence is
    non-increasing.
    """
    levels = tuple(levels)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigurationError("quantile levels must be strictly increasing")
    if abs(levels[0] + levels[-1] - 1.0) > 1e-9:
        raise ConfigurationError("outer quantile levels must satisfy lo + hi = 1")

    Zraw, y, _ = design_matrix(train)
    scaler = InputScaler.fit(Zraw)
    Z1 = np.column_stack([scaler.apply(Zraw), np.ones(len(y))])
    W = np.zeros((len(levels), Z1.shape[1]))

    def head_loss(w, q):
        u = y - Z1 @ w
        return float(np.mean(np.where(u >= 0, q * u, (q - 1.0) * u)))

    # the per-level losses are separable, so each head descends on its own
    for k, q in enumerate(levels):
        w = W[k]
        lr = learning_rate
        loss = head_loss(w, q)
        for _ in range(steps):
            u = y - Z1 @ w
            grad = -Z1.T @ np.where(u >= 0, q, q - 1.0) / len(y)
            w_new = w - lr * grad
            loss_new = head_loss(w_new, q)
            if not math.isfinite(loss_new):
                raise NumericalError("quantile training diverged (non-finite loss)")
            if loss_new > loss:
                lr *= 0.5      # reject the step, keep the loss monotone
            else:
                w, loss = w_new, loss_new
                lr *= 1.1      # regrow so rejected steps do not stall descent
        W[k] = w
    conf = levels[-1] - levels[0]
    z = NormalDist().inv_cdf((1.0 + conf) / 2.0)
    return QuantileModel(scaler, levels, W, z)


def _quantile_predict_batch(m: QuantileModel, Zq_raw):
    Z1 = np.column_stack([m.scaler.apply(Zq_raw), np.ones(len(Zq_raw))])
    preds = Z1 @ m.weights.T            # (n, n_levels)
    preds = np.sort(preds, axis=1)      # monotone rearrangement repairs crossings
    mean = preds[:, len(m.levels) // 2]
    std = (preds[:, -1] - preds[:, 0]) / (2.0 * m.z_score)
    return mean, np.maximum(std, SIGMA_FLOOR)


def predict_quantile(m: QuantileModel, q: PredictorInput) -> Prediction:
    _check_dim(m.scaler, q)
    mean, std = _quantile_predict_batch(m, q.as_row()[None, :])
    return Prediction(float(mean[0]), float(std[0]))


# ---------------------------------------------------------------------------
# Bootstrap ridge ensemble

@dataclass(frozen=True)
class BootstrapModel:
    scaler: InputScaler
    members: np.ndarray           # (B, p+1) ridge weights, bias last
    ridge_lambda: float
    std_scale: float = 1.0        # deliberate std miscalibration, for experiments


def _ridge_solve(Z1, y, lam):
    penalty = lam * np.eye(Z1.shape[1])
    penalty[-1, -1] = 0.0         # intercept unpenalized
    A = Z1.T @ Z1 + penalty
    try:
        return np.linalg.solve(A, Z1.T @ y)
    except np.linalg.LinAlgError:
        raise NumericalError("singular ridge normal equations")


def fit_bootstrap(train: Dataset, B: int = 20, ridge_lambda: float = 1.0,
                  seed: int = 0, std_scale: float = 1.0) -> BootstrapModel:
    """Fit B closed-form ridge regressors on subject-level bootstrap resamples."""
    if B < 2:
        raise ConfigurationError("ensemble size B must be >= 2")
    scored = [s for s in train.subjects if s.visits]
    if len(scored) < 2:
        raise DataError("bootstrap fitting needs at least 2 training subjects with visits")
    Zraw, y, owners = design_matrix(train)
    scaler = InputScaler.fit(Zraw)
    Z1 = np.column_stack([scaler.apply(Zraw), np.ones(len(y))])

    subject_rows = {}
    for row, owner in enumerate(owners):
        subject_rows.setdefault(owner, []).append(row)
    subject_ids = sorted(subject_rows)

    rng = np.random.default_rng(seed)
    members = []
    for _ in range(B):
        picks = rng.choice(len(subject_ids), size=len(subject_ids), replace=True)
        rows = np.concatenate([subject_rows[subject_ids[p]] for p in picks])
        members.append(_ridge_solve(Z1[rows], y[rows], ridge_lambda))
    return BootstrapModel(scaler, np.asarray(members), ridge_lambda, std_scale)


def _bootstrap_predict_batch(m: BootstrapModel, Zq_raw):
    Z1 = np.column_stack([m.scaler.apply(Zq_raw), np.ones(len(Zq_raw))])
    preds = Z1 @ m.members.T            # (n, B)
    mean = preds.mean(axis=1)
    std = preds.std(axis=1, ddof=1) * m.std_scale
    return mean, np.maximum(std, SIGMA_FLOOR)


def predict_bootstrap(m: BootstrapModel, q: PredictorInput) -> Prediction:
    _check_dim(m.scaler, q)
    mean, std = _bootstrap_predict_batch(m, q.as_row()[None, :])
    return Prediction(float(mean[0]), float(std[0]))


# ---------------------------------------------------------------------------
# Common dispatch

_BATCH = {
    GpModel: _gp_predict_batch,
    QuantileModel: _quantile_predict_batch,
    BootstrapModel: _bootstrap_predict_batch,
}


def _check_dim(scaler: InputScaler, q: PredictorInput):
    if len(q.x) + 1 != len(scaler.mean):
        raise DataError(f"input dimension {len(q.x)} does not match fitted model "
                        f"({len(scaler.mean) - 1})")


def predict_batch(model, X, times):
    """Vectorized prediction: rows of X paired element-wise with times."""
    X = np.asarray(X, dtype=float)
    rows = np.column_stack([X, np.asarray(times, dtype=float)])
    return _BATCH[type(model)](model, rows)


def predict_point(model, q: PredictorInput) -> Prediction:
    mean, std = _BATCH[type(model)](model, q.as_row()[None, :])
    return Prediction(float(mean[0]), float(std[0]))


def predict_trajectory(model, x, times):
    """Predictions for one subject over a list of query months, order preserved."""
    if len(times) == 0:
        return []
    x = np.asarray(x, dtype=float)
    if len(x) + 1 != len(model.scaler.mean):
        raise DataError(f"input dimension {len(x)} does not match fitted model "
                        f"({len(model.scaler.mean) - 1})")
    X = np.tile(x, (len(times), 1))
    means, stds = predict_batch(model, X, times)
    return [Prediction(float(m), float(s)) for m, s in zip(means, stds)]


# ---------------------------------------------------------------------------
# Serialization

_KINDS = {"gp": GpModel, "quantile": QuantileModel, "bootstrap": BootstrapModel}


def _arr(a):
    return np.asarray(a).tolist()


def save_model(model, path):
    scaler = {"mean": _arr(model.scaler.mean), "std": _arr(model.scaler.std)}
    if isinstance(model, GpModel):
        doc = {"kind": "gp", "scaler": scaler, "Z": _arr(model.Z), "y": _arr(model.y),
               "signal_var": model.signal_var, "lengthscale": model.lengthscale,
               "noise_var": model.noise_var, "L": _arr(model.L),
               "alpha": _arr(model.alpha), "log_marginal": model.log_marginal}
    elif isinstance(model, QuantileModel):
        doc = {"kind": "quantile", "scaler": scaler, "levels": list(model.levels),
               "weights": _arr(model.weights), "z_score": model.z_score}
    elif isinstance(model, BootstrapModel):
        doc = {"kind": "bootstrap", "scaler": scaler, "members": _arr(model.members),
               "ridge_lambda": model.ridge_lambda, "std_scale": model.std_scale}
    else:
        raise ConfigurationError(f"cannot serialize model of type {type(model).__name__}")
    doc["schema_version"] = 1
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise ConfigurationError(f"unsupported model schema version {doc.get('schema_version')}")
    scaler = InputScaler(np.asarray(doc["scaler"]["mean"]), np.asarray(doc["scaler"]["std"]))
    kind = doc["kind"]
    if kind == "gp":
        L = np.asarray(doc["L"])
        L_inv = np.linalg.inv(L)
        return GpModel(scaler, np.asarray(doc["Z"]), np.asarray(doc["y"]),
                       doc["signal_var"], doc["lengthscale"], doc["noise_var"],
                       L, np.asarray(doc["alpha"]), L_inv.T @ L_inv,
                       doc["log_marginal"])
    if kind == "quantile":
        return QuantileModel(scaler, tuple(doc["levels"]), np.asarray(doc["weights"]),
                             doc["z_score"])
    if kind == "bootstrap":
        return BootstrapModel(scaler, np.asarray(doc["members"]), doc["ridge_lambda"],
                              doc["std_scale"])
    raise ConfigurationError(f"unknown model kind {kind!r}")
