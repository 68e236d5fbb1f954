"""Temporal posterior predictive checks for the factor model.

For every timestep the test statistic is the across-patient mean of the
expected log-likelihood of the treatments at that step, where the
expectation over the substitute confounders is a Monte-Carlo average over
dropout draws. Treatment replicas sampled from the model are scored with
the same statistic, and the p-value at timestep t is the fraction of
replicas whose statistic falls strictly below the held-out statistic —
0.5 is ideal, and ties push the p-value to zero by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, pad_and_mask
from .factor_model import FactorModel, predict_probs_batch, sample_treatment_replicas
from .numerics import derive_seed

PROB_FLOOR = 1e-12


@dataclass
class CheckReport:
    timesteps: np.ndarray        # (T,) zero-based step indices
    p_values: np.ndarray         # (T,)
    stat_val: np.ndarray         # (T,) held-out statistic
    stat_reps: np.ndarray        # (M, T) replica statistics
    stderr_patients: np.ndarray  # (T,) std error of the statistic across patients
    n_active: np.ndarray         # (T,) patients active at each step
    m: int
    clamped: bool = False        # a probability hit the clamp boundary

    def mean_p(self, tail_fraction: float | None = None) -> float:
        """Mean p-value across timesteps; tail_fraction=1/3 restricts to the
        final third of the steps."""
        p = self.p_values
        if tail_fraction is not None:
            start = int(np.ceil(len(p) * (1.0 - tail_fraction)))
            p = p[start:]
        return float(p.mean())

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,p_value,stderr\n")
            for t, p, se in zip(self.timesteps, self.p_values, self.stderr_patients):
                fh.write(f"{int(t)},{float(p)!r},{float(se)!r}\n")


def _clamp(probs):
    clipped = np.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return clipped, bool((clipped != probs).any())


def log_lik_per_patient(probs, a):
    """Per-(patient, step) treatment log-likelihood, summed over the k
    treatments and averaged over leading Monte-Carlo draws when probs is
    (S, N, T, k) rather than (N, T, k). Returns ((N, T), clamped_flag)."""
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == a.ndim:
        probs = probs[None]
    p, clamped = _clamp(probs)
    ll = a * np.log(p) + (1.0 - a) * np.log(1.0 - p)
    return ll.sum(axis=-1).mean(axis=0), clamped


def test_statistic(probs, a, active=None) -> float:
    """Statistic for one timestep: probs (S, N, k) or (N, k), a (N, k);
    optional boolean `active` selects the patients still observed."""
    probs = np.asarray(probs, dtype=float)
    a = np.asarray(a, dtype=float)
    if probs.ndim == a.ndim:
        probs = probs[None]
    p, _ = _clamp(probs)
    ll = (a * np.log(p) + (1.0 - a) * np.log(1.0 - p)).sum(axis=-1).mean(axis=0)
    if active is not None:
        ll = ll[np.asarray(active, dtype=bool)]
    if ll.size == 0:
        raise ValueError("no active patients at this timestep")
    return float(ll.mean())


def _per_step_stats(ll, mask):
    """Masked per-timestep mean, std error and active counts of (N, T) lls."""
    n_active = mask.sum(axis=0)
    keep = n_active > 0
    sums = (ll * mask).sum(axis=0)
    means = np.full(ll.shape[1], np.nan)
    means[keep] = sums[keep] / n_active[keep]
    sq = ((ll - means[None, :]) ** 2 * mask).sum(axis=0)
    stderr = np.full(ll.shape[1], np.nan)
    ok = n_active > 1
    stderr[ok] = np.sqrt(sq[ok] / (n_active[ok] - 1)) / np.sqrt(n_active[ok])
    return means, stderr, n_active.astype(int), keep


def p_values_from_stats(stat_reps, stat_val):
    """Fraction of replicas strictly below the held-out statistic, per t."""
    return (stat_reps < stat_val[None, :]).mean(axis=0)


def check_from_probs(prob_draws, replicas, a_val, mask, m) -> CheckReport:
    """Pure-array predictive check: prob_draws (S, N, T, k) score both the
    validation treatments a_val and each replica; no model required."""
    ll_val, c1 = log_lik_per_patient(prob_draws, a_val)
    stat_val, stderr, n_active, keep = _per_step_stats(ll_val, mask)
    stat_reps = np.empty((m, mask.shape[1]))
    clamped = c1
    for r in range(m):
        ll_rep, c2 = log_lik_per_patient(prob_draws, replicas[r])
        clamped = clamped or c2
        rep_means, _, _, _ = _per_step_stats(ll_rep, mask)
        stat_reps[r] = rep_means
    p = p_values_from_stats(stat_reps[:, keep], stat_val[keep])
    return CheckReport(
        timesteps=np.flatnonzero(keep),
        p_values=p,
        stat_val=stat_val[keep],
        stat_reps=stat_reps[:, keep],
        stderr_patients=stderr[keep],
        n_active=n_active[keep],
        m=m,
        clamped=clamped,
    )


def predictive_p_values(model: FactorModel, val: Dataset, m: int = 50,
                        seed: int = 0, s_draws: int = 10) -> CheckReport:
    """Predictive check of `model` against the held-out treatments in `val`.

    The expectation over the substitutes uses s_draws dropout draws; each of
    the m replicas is sampled from a fresh dropout draw of the treatment
    probabilities. Deterministic given (model, val, m, seed)."""
    if m < 2:
        raise ValueError("m must be >= 2")
    batch = pad_and_mask(val)
    prob_draws = np.stack([
        predict_probs_batch(model, batch, derive_seed(seed, "stat-mask", s))
        for s in range(s_draws)
    ])
    replicas, _ = sample_treatment_replicas(model, val, m, seed)
    return check_from_probs(prob_draws, replicas, batch.a, batch.mask, m)
