import numpy as np
import pytest

from seqdeconf.iptw import cumulative_weights, observed_density, truncate_weights
from seqdeconf.msm import (
    MsmOutcomeModel,
    build_rows,
    compute_weights,
    fit_logistic,
    fit_msm,
    fit_propensity_models,
    outcome_features,
    predict_msm,
    propensity_features,
    rmse,
)
from seqdeconf.numerics import sigmoid, stream
from seqdeconf.simulate import SynthConfig, simulate_synthetic


def irls_logistic(features, targets, iters=50):
    """Independent IRLS solver used as the coefficient oracle."""
    xs = np.column_stack([np.ones(len(targets)), features])
    w = np.zeros(xs.shape[1])
    for _ in range(iters):
        mu = 1.0 / (1.0 + np.exp(-(xs @ w)))
        sww = np.clip(mu * (1 - mu), 1e-10, None)
        h = xs.T @ (sww[:, None] * xs)
        g = xs.T @ (targets - mu)
        w = w + np.linalg.solve(h, g)
    return w


def test_logistic_recovers_base_rate():
    rng = stream(1, "base")
    x = rng.normal(size=(3000, 4))
    y = (rng.random(3000) < 0.35).astype(float)
    model = fit_logistic(x, y)
    assert not model.separated
    assert abs(model.predict_proba(x).mean() - y.mean()) < 0.01


def test_logistic_flags_separation_and_keeps_densities_valid():
    rng = stream(2, "sep")
    x = rng.normal(size=(300, 1))
    y = (x[:, 0] > 0).astype(float)
    model = fit_logistic(x, y)
    assert model.separated
    assert model.ridge >= 1e-4
    dens = observed_density(model.predict_proba(x)[:, None], y[:, None])
    assert ((dens > 0) & (dens < 1)).all()


def test_logistic_matches_irls_oracle():
    rng = stream(3, "irls")
    x = rng.normal(size=(200, 3))
    logits = 0.4 + x @ np.array([0.8, -0.5, 0.2])
    y = (rng.random(200) < sigmoid(logits)).astype(float)
    model = fit_logistic(x, y)
    assert model.converged
    ref = irls_logistic(x, y)
    assert np.abs(model.w - ref).max() < 1e-4


def synth_rows(n=60, gamma=0.5, seed=4, with_z=True):
    ds = simulate_synthetic(SynthConfig(n_patients=n, gamma_a=gamma, gamma_y=gamma,
                                        t_min=6, t_max=10, seed=seed))
    z_list = [p.z for p in ds.patients] if with_z else None
    return ds, build_rows(ds, z_list=z_list)


def test_build_rows_layout():
    ds, rows = synth_rows(n=12)
    p0 = ds.patients[0]
    t0 = p0.t_len
    assert np.array_equal(rows.cum_prev[0], np.zeros(ds.k))
    assert np.array_equal(rows.cum_incl[0], p0.a[0])
    assert np.array_equal(rows.cum_prev[t0 - 1], p0.a[: t0 - 1].sum(axis=0))
    assert np.array_equal(rows.x_lag[0], np.zeros(ds.cov_dim))
    assert np.array_equal(rows.x_lag[1], p0.x[0])
    assert np.array_equal(rows.z_lag[0], np.zeros(p0.z.shape[1]))
    assert rows.y[0] == p0.y[0]
    num = propensity_features(rows, "num")
    den = propensity_features(rows, "den")
    assert num.shape[1] == ds.k
    assert den.shape[1] == ds.k + 2 * ds.cov_dim + 2 * p0.z.shape[1]


def test_identical_models_and_features_give_unit_weights():
    _, rows = synth_rows(n=20)
    models = fit_propensity_models(rows, max_iter=300)
    from seqdeconf.msm import PropensityModels
    shared = PropensityModels(num=models.num, den=models.num)
    feats = propensity_features(rows, "num")
    weights = compute_weights(shared, rows, num_features=feats, den_features=feats,
                              truncate=None)
    assert np.allclose(weights.sw, 1.0)
    assert np.allclose(weights.w, 1.0)


def test_hand_computed_two_step_weights():
    num_p = np.array([[0.5], [0.5]])
    den_p = np.array([[0.8], [0.4]])
    a = np.array([[1.0], [0.0]])
    num_d = observed_density(num_p, a)
    den_d = observed_density(den_p, a)
    sw = num_d / den_d
    w = cumulative_weights(sw, np.array([0, 0]))
    assert abs(w[1] - (0.5 / 0.8) * (0.5 / 0.6)) < 1e-12


def test_truncation_clips_tails():
    w = np.concatenate([np.ones(98), [100.0, 1e-4]])
    clipped, (lo, hi) = truncate_weights(w, (1.0, 99.0))
    assert clipped.max() <= hi < 100.0
    assert clipped.min() >= lo > 1e-4


def test_mean_cumulative_weight_near_one_without_confounding():
    _, rows = synth_rows(n=400, gamma=0.0, seed=6, with_z=False)
    models = fit_propensity_models(rows)
    weights = compute_weights(models, rows)
    assert 0.8 <= float(np.mean(weights.w)) <= 1.2


def test_wls_recovers_exact_linear_outcome():
    _, rows = synth_rows(n=40, seed=7)
    feats = outcome_features(rows)
    true_coef = stream(8, "coef").normal(size=feats.shape[1])
    rows.y = feats @ true_coef
    model = fit_msm(rows, np.ones(len(rows.y)))
    assert np.abs(model.coef - true_coef).max() < 1e-6
    assert rmse(predict_msm(model, rows), rows.y) < 1e-8


def test_wls_invariant_to_weight_rescaling():
    _, rows = synth_rows(n=30, seed=9)
    w = stream(10, "w").uniform(0.5, 2.0, size=len(rows.y))
    m1 = fit_msm(rows, w)
    m2 = fit_msm(rows, 2.0 * w)
    assert np.allclose(m1.coef, m2.coef, atol=1e-10)


def test_wls_matches_lstsq_oracle():
    _, rows = synth_rows(n=25, seed=11)
    w = stream(12, "w2").uniform(0.2, 3.0, size=len(rows.y))
    model = fit_msm(rows, w, ridge=0.0)
    sq = np.sqrt(w)
    feats = outcome_features(rows)
    ref, *_ = np.linalg.lstsq(feats * sq[:, None], rows.y * sq, rcond=None)
    assert np.abs(model.coef - ref).max() < 1e-8


def test_wls_escalates_on_rank_deficiency():
    _, rows = synth_rows(n=15, seed=13)
    rows.x_lag = rows.x_t.copy()  # duplicate columns: rank-deficient design
    model = fit_msm(rows, np.ones(len(rows.y)), ridge=0.0)
    assert model.escalated
    assert np.isfinite(model.coef).all()


def test_predict_rejects_mismatched_rows():
    _, rows_z = synth_rows(n=15, seed=14, with_z=True)
    _, rows_noz = synth_rows(n=15, seed=14, with_z=False)
    model = fit_msm(rows_z, np.ones(len(rows_z.y)))
    with pytest.raises(ValueError):
        predict_msm(model, rows_noz)
