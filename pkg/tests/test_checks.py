import numpy as np
import pytest

from seqdeconf.checks import (
    CheckReport,
    check_from_probs,
    p_values_from_stats,
    predictive_p_values,
)
from seqdeconf.checks import test_statistic as treatment_statistic
from seqdeconf.data import Dataset, PatientTrajectory, pad_and_mask, split_dataset
from seqdeconf.factor_model import FactorModelConfig, train_factor_model
from seqdeconf.numerics import stream


def test_statistic_half_probs():
    a = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    got = treatment_statistic(np.full((3, 2), 0.5), a)
    assert abs(got - 2 * np.log(0.5)) < 1e-12


def test_statistic_perfect_probs_near_zero():
    a = np.array([[1.0, 0.0]])
    probs = np.array([[1.0, 0.0]])  # clamps internally
    assert abs(treatment_statistic(probs, a)) < 1e-10


def test_statistic_matches_hand_computation():
    # two patients, two treatments, averaged over two substitute draws
    probs = np.array([
        [[0.8, 0.3], [0.6, 0.9]],
        [[0.7, 0.4], [0.5, 0.8]],
    ])  # (S=2, N=2, k=2)
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    by_hand = 0.0
    for s in range(2):
        ll1 = np.log(probs[s, 0, 0]) + np.log(1 - probs[s, 0, 1])
        ll2 = np.log(1 - probs[s, 1, 0]) + np.log(probs[s, 1, 1])
        by_hand += 0.5 * (ll1 + ll2) / 2
    assert abs(treatment_statistic(probs, a) - by_hand) < 1e-12


def test_statistic_requires_active_patients():
    with pytest.raises(ValueError):
        treatment_statistic(np.full((2, 1), 0.5), np.zeros((2, 1)), active=[False, False])


def test_p_value_brute_force_count():
    stat_reps = np.array([[-1.0], [-3.0], [-2.0], [-5.0]])
    stat_val = np.array([-2.5])
    assert p_values_from_stats(stat_reps, stat_val)[0] == 0.5


def test_p_value_ties_give_zero():
    stat_reps = np.full((7, 3), -1.23)
    stat_val = np.full(3, -1.23)
    assert (p_values_from_stats(stat_reps, stat_val) == 0.0).all()


def test_calibrated_process_gives_centered_p_values():
    # replicas and validation data drawn from the same Bernoulli process
    rng = stream(99, "calib")
    n, t, k, m = 500, 10, 3, 100
    truth = rng.uniform(0.2, 0.8, size=(1, n, t, k))
    mask = np.ones((n, t))
    a_val = (rng.random((n, t, k)) < truth[0]).astype(float)
    replicas = [(rng.random((n, t, k)) < truth[0]).astype(float) for _ in range(m)]
    report = check_from_probs(truth, replicas, a_val, mask, m)
    assert ((report.p_values >= 0.0) & (report.p_values <= 1.0)).all()
    assert 0.4 <= report.mean_p() <= 0.6


def test_check_report_tail_mean_and_csv(tmp_path):
    report = CheckReport(
        timesteps=np.arange(6),
        p_values=np.array([0.9, 0.8, 0.7, 0.6, 0.3, 0.0]),
        stat_val=np.zeros(6),
        stat_reps=np.zeros((2, 6)),
        stderr_patients=np.linspace(0.01, 0.06, 6),
        n_active=np.full(6, 10),
        m=2,
    )
    assert abs(report.mean_p() - np.mean([0.9, 0.8, 0.7, 0.6, 0.3, 0.0])) < 1e-12
    assert abs(report.mean_p(tail_fraction=1 / 3) - 0.15) < 1e-12
    path = tmp_path / "pvals.csv"
    report.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,p_value,stderr"
    assert len(lines) == 7
    back = np.array([float(line.split(",")[1]) for line in lines[1:]])
    assert np.array_equal(back, report.p_values)


def _small_model_and_val():
    rng = stream(5, "checks-ds")
    patients = []
    for _ in range(60):
        t = int(rng.integers(5, 9))
        x = rng.normal(size=(t, 2))
        a = (rng.random((t, 2)) < 0.5).astype(float)
        patients.append(PatientTrajectory(x=x, a=a, y=np.zeros(t)))
    ds = Dataset(patients=patients, k=2, cov_dim=2)
    train, val, _ = split_dataset(ds, seed=1)
    cfg = FactorModelConfig(d_z=1, rnn_hidden=8, fc_hidden=6, dropout=0.2,
                            epochs=4, batch_size=16, seed=2)
    return train_factor_model(train, val, cfg), val


def test_predictive_p_values_deterministic_and_masked():
    model, val = _small_model_and_val()
    r1 = predictive_p_values(model, val, m=20, seed=3, s_draws=4)
    r2 = predictive_p_values(model, val, m=20, seed=3, s_draws=4)
    assert np.array_equal(r1.p_values, r2.p_values)
    assert ((r1.p_values >= 0) & (r1.p_values <= 1)).all()
    batch = pad_and_mask(val)
    assert np.array_equal(r1.n_active, batch.mask.sum(axis=0).astype(int))
    assert r1.stat_reps.shape == (20, len(r1.timesteps))
    with pytest.raises(ValueError):
        predictive_p_values(model, val, m=1, seed=0)
