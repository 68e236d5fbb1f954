"""Marginal structural model: per-treatment logistic regressions give
stabilized inverse-probability weights, then a weighted linear regression
predicts the one-step-ahead response.

Regressor layout per (patient, t) row:
  propensity numerator    cumulative treatment counts before t;
  propensity denominator  adds X_t, X_{t-1} and, per scenario, Z_t, Z_{t-1};
  outcome regression      cumulative counts through t plus the same
                          covariate/confounder lags, weighted by the
                          truncated cumulative stabilized weight.
Step-0 rows use zeros for the lagged features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .iptw import cumulative_weights, observed_density, truncate_weights
from .numerics import sigmoid


@dataclass
class MsmRows:
    """Flattened per-(patient, t) design arrays for one dataset."""

    cum_prev: np.ndarray        # (R, k) treatment counts before t
    cum_incl: np.ndarray        # (R, k) treatment counts through t
    x_t: np.ndarray             # (R, cov_dim)
    x_lag: np.ndarray           # (R, cov_dim)
    z_t: np.ndarray | None      # (R, d_z) or None
    z_lag: np.ndarray | None
    a: np.ndarray               # (R, k) treatments at t
    y: np.ndarray               # (R,) outcome observed after t
    patient: np.ndarray         # (R,) patient index, rows time-ordered per patient

    @property
    def has_z(self) -> bool:
        return self.z_t is not None


def build_rows(ds: Dataset, z_list=None) -> MsmRows:
    """z_list: optional per-patient (T, d_z) arrays (oracle or substitute);
    omit it for the confounder-blind scenario."""
    cum_prev, cum_incl, x_t, x_lag, z_t, z_lag, a_rows, y_rows, pid = (
        [], [], [], [], [], [], [], [], [])
    for i, p in enumerate(ds.patients):
        counts = np.zeros(ds.k)
        z = None if z_list is None else np.asarray(z_list[i], dtype=float)
        for t in range(p.t_len):
            cum_prev.append(counts.copy())
            counts = counts + p.a[t]
            cum_incl.append(counts.copy())
            x_t.append(p.x[t])
            x_lag.append(p.x[t - 1] if t > 0 else np.zeros(ds.cov_dim))
            if z is not None:
                z_t.append(z[t])
                z_lag.append(z[t - 1] if t > 0 else np.zeros(z.shape[1]))
            a_rows.append(p.a[t])
            y_rows.append(p.y[t])
            pid.append(i)
    return MsmRows(
        cum_prev=np.asarray(cum_prev),
        cum_incl=np.asarray(cum_incl),
        x_t=np.asarray(x_t),
        x_lag=np.asarray(x_lag),
        z_t=np.asarray(z_t) if z_list is not None else None,
        z_lag=np.asarray(z_lag) if z_list is not None else None,
        a=np.asarray(a_rows),
        y=np.asarray(y_rows),
        patient=np.asarray(pid),
    )


def propensity_features(rows: MsmRows, kind: str) -> np.ndarray:
    """'num' uses only the cumulative counts; 'den' adds the covariate and
    (when present) confounder columns."""
    if kind == "num":
        return rows.cum_prev
    cols = [rows.cum_prev, rows.x_t, rows.x_lag]
    if rows.has_z:
        cols += [rows.z_t, rows.z_lag]
    return np.concatenate(cols, axis=1)


def outcome_features(rows: MsmRows) -> np.ndarray:
    cols = [np.ones((len(rows.y), 1)), rows.cum_incl, rows.x_t, rows.x_lag]
    if rows.has_z:
        cols += [rows.z_t, rows.z_lag]
    return np.concatenate(cols, axis=1)


# ---------------------------------------------------------------------------
# logistic regression by gradient descent with line search
# ---------------------------------------------------------------------------

@dataclass
class LogisticModel:
    w: np.ndarray               # raw-space coefficients, intercept first
    separated: bool = False
    ridge: float = 0.0
    converged: bool = True

    def predict_proba(self, features) -> np.ndarray:
        return sigmoid(self.w[0] + features @ self.w[1:])


DIVERGENCE_BOUND = 30.0


def _nll_and_grad(w, xs, y, ridge):
    z = xs @ w
    p = sigmoid(z)
    nll = float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    nll += 0.5 * ridge * float(w[1:] @ w[1:])
    grad = xs.T @ (p - y) / len(y)
    grad[1:] += ridge * w[1:]
    return nll, grad


def _gd_fit(xs, y, ridge, max_iter, tol):
    # Gradient descent with a Barzilai-Borwein trial step and nonmonotone
    # backtracking; orders of magnitude fewer iterations than a fixed step.
    w = np.zeros(xs.shape[1])
    step = 1.0
    nll, grad = _nll_and_grad(w, xs, y, ridge)
    history = [nll]
    prev_w = prev_grad = None
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return w, True, False
        if np.abs(w).max() > DIVERGENCE_BOUND:
            return w, False, True
        if prev_w is not None:
            dw = w - prev_w
            dg = grad - prev_grad
            curv = float(dw @ dg)
            step = float(dw @ dw) / curv if curv > 1e-18 else min(step * 2.0, 1e4)
        ref = max(history[-5:])
        while True:
            cand = w - step * grad
            c_nll, c_grad = _nll_and_grad(cand, xs, y, ridge)
            if c_nll <= ref - 1e-4 * step * gnorm ** 2 or step < 1e-14:
                break
            step *= 0.5
        prev_w, prev_grad = w, grad
        w, nll, grad = cand, c_nll, c_grad
        history.append(nll)
    return w, False, np.abs(w).max() > DIVERGENCE_BOUND


def fit_logistic(features, targets, ridge: float = 0.0, max_iter: int = 800,
                 tol: float = 1e-6) -> LogisticModel:
    """Full-batch gradient descent with backtracking line search on the mean
    negative log-likelihood. Features are standardized internally for
    conditioning; returned coefficients live in raw feature space. If the
    weights diverge (separation), the fit restarts with an L2 ridge of 1e-4
    and the model is flagged."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std < 1e-12] = 1.0
    xs = np.column_stack([np.ones(len(targets)), (features - mean) / std])
    w, converged, diverged = _gd_fit(xs, targets, ridge, max_iter, tol)
    used_ridge = ridge
    separated = False
    if diverged:
        separated = True
        used_ridge = max(ridge, 1e-4)
        w, converged, _ = _gd_fit(xs, targets, used_ridge, max_iter, tol)
    raw = np.empty_like(w)
    raw[1:] = w[1:] / std
    raw[0] = w[0] - float(mean @ raw[1:])
    return LogisticModel(w=raw, separated=separated, ridge=used_ridge, converged=converged)


@dataclass
class PropensityModels:
    num: list[LogisticModel]    # one per treatment
    den: list[LogisticModel]


def fit_propensity_models(rows: MsmRows, **fit_kw) -> PropensityModels:
    num_x = propensity_features(rows, "num")
    den_x = propensity_features(rows, "den")
    num = [fit_logistic(num_x, rows.a[:, j], **fit_kw) for j in range(rows.a.shape[1])]
    den = [fit_logistic(den_x, rows.a[:, j], **fit_kw) for j in range(rows.a.shape[1])]
    return PropensityModels(num=num, den=den)


@dataclass
class PropensityWeights:
    num_density: np.ndarray
    den_density: np.ndarray
    sw: np.ndarray              # per-step stabilized weight
    w_cum: np.ndarray           # cumulative product within patient
    w: np.ndarray               # truncated cumulative weight (use this)
    truncation: tuple


def compute_weights(models: PropensityModels, rows: MsmRows,
                    num_features=None, den_features=None,
                    truncate=(1.0, 99.0)) -> PropensityWeights:
    num_x = propensity_features(rows, "num") if num_features is None else num_features
    den_x = propensity_features(rows, "den") if den_features is None else den_features
    num_p = np.column_stack([m.predict_proba(num_x) for m in models.num])
    den_p = np.column_stack([m.predict_proba(den_x) for m in models.den])
    num_density = observed_density(num_p, rows.a)
    den_density = observed_density(den_p, rows.a)
    sw = num_density / den_density
    w_cum = cumulative_weights(sw, rows.patient)
    w, bounds = truncate_weights(w_cum, truncate)
    return PropensityWeights(
        num_density=num_density, den_density=den_density,
        sw=sw, w_cum=w_cum, w=w, truncation=bounds,
    )


# ---------------------------------------------------------------------------
# weighted least squares outcome model
# ---------------------------------------------------------------------------

@dataclass
class MsmOutcomeModel:
    coef: np.ndarray
    has_z: bool
    ridge: float = 1e-8
    escalated: bool = False


def fit_msm(rows: MsmRows, weights: np.ndarray, ridge: float = 1e-8) -> MsmOutcomeModel:
    """Closed-form weighted least squares on the outcome regressors; the
    ridge escalates (and is flagged) on a rank-deficient design."""
    xs = outcome_features(rows)
    wx = xs * weights[:, None]
    gram = xs.T @ wx
    rhs = wx.T @ rows.y
    used = ridge
    escalated = False
    while True:
        try:
            coef = np.linalg.solve(gram + used * np.eye(gram.shape[0]), rhs)
        except np.linalg.LinAlgError:
            coef = None
        if coef is not None and np.isfinite(coef).all():
            break
        used *= 1e3
        escalated = True
        if used > 1.0:
            raise np.linalg.LinAlgError("outcome design is unusably singular")
    return MsmOutcomeModel(coef=coef, has_z=rows.has_z, ridge=used, escalated=escalated)


def predict_msm(model: MsmOutcomeModel, rows: MsmRows) -> np.ndarray:
    if rows.has_z != model.has_z:
        raise ValueError("rows and model disagree about confounder columns")
    return outcome_features(rows) @ model.coef


def rmse(y_true, y_pred) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    return float(np.sqrt(np.mean((y_true - y_pred) ** 2)))
