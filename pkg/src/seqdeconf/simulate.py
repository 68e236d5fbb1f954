"""Synthetic longitudinal generators with controllable hidden confounding.

Two generators share the Dataset contract:

* an autoregressive process where k covariates (single-cause confounders)
  and a d_true-dimensional hidden process jointly drive binary treatments
  and a scalar outcome, with gamma_a / gamma_y dialing how much of the
  assignment and outcome is driven by the hidden process;
* a pharmacokinetic-pharmacodynamic tumor-growth model where chemo and
  radiotherapy prescriptions react to tumor size and a static patient
  subgroup shifts the response-rate priors (the hidden confounder).

All randomness is drawn from per-patient child streams (see
numerics.stream), so datasets are bit-reproducible for a (config, seed)
pair and patients could be simulated in parallel.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, PatientTrajectory
from .numerics import sigmoid, stream


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# autoregressive generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_patients: int = 5000
    k: int = 3                 # treatments == covariates
    p: int = 5                 # autoregression order
    t_min: int = 20
    t_max: int = 30
    sharpness: float = 15.0    # lambda inside the assignment sigmoid
    gamma_a: float = 0.5
    gamma_y: float = 0.5
    d_true: int = 1            # simulated hidden-confounder channels
    noise_std: float = 0.01
    coeff_std: float = 0.5     # std of the alpha / lambda coefficient priors
    init_std: float = 0.1      # std of the step-0 covariate/confounder draw
    seed: int = 0


@dataclass
class SynthCoeffs:
    """One per-dataset draw of the autoregression coefficients."""

    alpha: np.ndarray   # (p, k)   covariate-on-covariate, lag i at row i-1
    omega: np.ndarray   # (p, k)   treatment-on-covariate
    beta: np.ndarray    # (p, d)   confounder-on-confounder
    lam: np.ndarray     # (p, k, d) treatment-on-confounder


def draw_coefficients(cfg: SynthConfig, rng) -> SynthCoeffs:
    p, k, d = cfg.p, cfg.k, cfg.d_true
    lags = np.arange(1, p + 1)
    decay_mean = 1.0 - lags / p
    alpha = rng.normal(0.0, cfg.coeff_std, size=(p, k))
    omega = rng.normal(decay_mean[:, None], 1.0 / p, size=(p, k))
    beta = rng.normal(decay_mean[:, None], 1.0 / p, size=(p, d))
    lam = rng.normal(0.0, cfg.coeff_std, size=(p, k, d))
    return SynthCoeffs(alpha=alpha, omega=omega, beta=beta, lam=lam)


def covariate_step(x_hist, a_hist, alpha, omega, eta):
    """One covariate update X_t = (1/p) * sum_i (alpha_i X_{t-i} + omega_i A_{t-i}) + eta.

    x_hist / a_hist hold past rows (..., m, k) with the most recent step
    last; only the final min(m, p) rows contribute and missing lags count
    as zero while the divisor stays p.
    """
    p = alpha.shape[0]
    m = min(x_hist.shape[-2], p)
    acc = np.zeros(np.broadcast_shapes(x_hist.shape[:-2] + x_hist.shape[-1:], eta.shape))
    for i in range(1, m + 1):
        acc = acc + alpha[i - 1] * x_hist[..., -i, :] + omega[i - 1] * a_hist[..., -i, :]
    return acc / p + eta


def confounder_step(z_hist, a_hist, beta, lam, eps):
    """Hidden-process update, one independent coefficient set per channel:
    Z_{t,d} = (1/p) * sum_i (beta_{i,d} Z_{t-i,d} + sum_j lam_{i,j,d} A_{t-i,j}) + eps_d.
    """
    p = beta.shape[0]
    m = min(z_hist.shape[-2], p)
    acc = np.zeros(np.broadcast_shapes(z_hist.shape[:-2] + z_hist.shape[-1:], eps.shape))
    for i in range(1, m + 1):
        acc = acc + beta[i - 1] * z_hist[..., -i, :]
        acc = acc + a_hist[..., -i, :] @ lam[i - 1]
    return acc / p + eps


def treatment_probs(x_hist, z_hist, gamma_a, sharpness, p):
    """Assignment probabilities at the current step.

    Histories include the current step as their last row. The covariate
    drive is the per-treatment sum over the last p steps; the hidden drive
    is the channel mean of the per-channel p-step sums.
    """
    m = min(x_hist.shape[-2], p)
    x_sum = x_hist[..., -m:, :].sum(axis=-2)
    z_sum = z_hist[..., -m:, :].sum(axis=-2).mean(axis=-1)
    drive = gamma_a * z_sum[..., None] + (1.0 - gamma_a) * x_sum
    return sigmoid(sharpness * drive)


def outcome_value(x_next, z_next, gamma_y):
    """Y_{t+1} = gamma_y * mean(Z_{t+1}) + (1 - gamma_y) * mean(X_{t+1});
    multi-channel hidden processes are averaged to a scalar before mixing."""
    return gamma_y * np.mean(z_next, axis=-1) + (1.0 - gamma_y) * np.mean(x_next, axis=-1)


def simulate_synthetic(cfg: SynthConfig) -> Dataset:
    """Simulate n_patients trajectories with oracle confounders recorded."""
    n, k, d, p = cfg.n_patients, cfg.k, cfg.d_true, cfg.p
    coeffs = draw_coefficients(cfg, stream(cfg.seed, "coeffs"))

    # Per-patient draws, in a fixed order, from per-patient child streams.
    t_len = np.zeros(n, dtype=int)
    for i in range(n):
        rng = stream(cfg.seed, "patient", i)
        t_len[i] = rng.integers(cfg.t_min, cfg.t_max + 1)
    tm = int(t_len.max())

    x = np.zeros((n, tm + 1, k))
    z = np.zeros((n, tm + 1, d))
    a = np.zeros((n, tm, k))
    eta = np.zeros((n, tm + 1, k))
    eps = np.zeros((n, tm + 1, d))
    u = np.ones((n, tm, k))  # padded thresholds of 1 never fire
    for i in range(n):
        rng = stream(cfg.seed, "patient", i)
        rng.integers(cfg.t_min, cfg.t_max + 1)  # consume the length draw
        t = t_len[i]
        x[i, 0] = rng.normal(0.0, cfg.init_std, size=k)
        z[i, 0] = rng.normal(0.0, cfg.init_std, size=d)
        eta[i, 1:t + 1] = rng.normal(0.0, cfg.noise_std, size=(t, k))
        eps[i, 1:t + 1] = rng.normal(0.0, cfg.noise_std, size=(t, d))
        u[i, :t] = rng.random(size=(t, k))

    for t in range(tm + 1):
        if t >= 1:
            x[:, t] = covariate_step(x[:, :t], a[:, :t], coeffs.alpha, coeffs.omega, eta[:, t])
            z[:, t] = confounder_step(z[:, :t], a[:, :t], coeffs.beta, coeffs.lam, eps[:, t])
        if t < tm:
            probs = treatment_probs(x[:, :t + 1], z[:, :t + 1], cfg.gamma_a, cfg.sharpness, p)
            a[:, t] = (u[:, t] < probs).astype(float)

    y = outcome_value(x[:, 1:], z[:, 1:], cfg.gamma_y)  # y[:, t] observed after step t

    patients = []
    for i in range(n):
        t = t_len[i]
        patients.append(PatientTrajectory(
            x=x[i, :t].copy(),
            a=a[i, :t].copy(),
            y=y[i, :t].copy(),
            z=z[i, :t].copy(),
        ))
    meta = {
        "generator": "synthetic-ar",
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
    }
    return Dataset(patients=patients, k=k, cov_dim=k, meta=meta)


# ---------------------------------------------------------------------------
# tumor-growth generator
# ---------------------------------------------------------------------------

def volume_from_diameter(d_cm):
    return 4.0 / 3.0 * np.pi * (np.asarray(d_cm) / 2.0) ** 3


def diameter_from_volume(v):
    return 2.0 * (3.0 * np.asarray(v) / (4.0 * np.pi)) ** (1.0 / 3.0)


@dataclass
class TumorConfig:
    """PK-PD tumor-growth simulation under chemo + radiotherapy.

    Response-rate priors (rho, alpha_r, beta_c, their spreads, the
    alpha/beta ratio, carrying capacity, dosing constants and the
    observation noise) follow the published PK-PD calibration this model
    family is normally run with; the assignment policy is a sigmoid in the
    deviation of the recent average tumor diameter from a reference
    diameter. Three equally likely patient subgroups scale the prior means
    of beta_c and alpha_r and act as the hidden confounder.
    """

    n_patients: int = 12000
    max_t: int = 30
    seed: int = 0
    # growth and treatment-response priors
    k_capacity_diam_cm: float = 30.0
    rho_mean: float = 7.0e-5
    rho_std: float = 7.23e-3
    alpha_r_mean: float = 0.0398
    alpha_r_std: float = 0.168
    alpha_rho_corr: float = 0.87
    beta_c_mean: float = 0.028
    beta_c_std: float = 0.0007
    alpha_beta_ratio: float = 10.0   # beta_r = alpha_r / ratio
    noise_std: float = 0.01
    # dosing models
    chemo_amount: float = 5.0
    chemo_half_life_days: float = 1.0
    radio_dose: float = 2.0
    # assignment policy: Bernoulli(sigmoid(slope * (avg diameter - ref)))
    assign_window: int = 15
    chemo_slope: float = 0.75
    chemo_ref_diam_cm: float = 6.5
    radio_slope: float = 0.75
    radio_ref_diam_cm: float = 6.5
    # subgroup heterogeneity (hidden confounder): prior-mean gains
    chemo_gain_by_group: tuple = (1.0, 1.0, 1.1)
    radio_gain_by_group: tuple = (1.1, 1.0, 1.0)
    # initial diameter: truncated lognormal (cm)
    init_diam_mu_ln: float = 1.05
    init_diam_sigma_ln: float = 0.6
    init_diam_min_cm: float = 0.5
    init_diam_max_cm: float = 10.0
    death_diam_cm: float = 13.0


def _draw_patient_params(cfg: TumorConfig, rng):
    group = int(rng.integers(1, 4))
    a_mean = cfg.alpha_r_mean * cfg.radio_gain_by_group[group - 1]
    cov = cfg.alpha_rho_corr * cfg.alpha_r_std * cfg.rho_std
    sig = np.array([
        [cfg.alpha_r_std ** 2, cov],
        [cov, cfg.rho_std ** 2],
    ])
    while True:
        alpha_r, rho = rng.multivariate_normal([a_mean, cfg.rho_mean], sig)
        if alpha_r >= 0 and rho >= 0:
            break
    c_mean = cfg.beta_c_mean * cfg.chemo_gain_by_group[group - 1]
    while True:
        beta_c = rng.normal(c_mean, cfg.beta_c_std)
        if beta_c >= 0:
            break
    while True:
        diam0 = np.exp(rng.normal(cfg.init_diam_mu_ln, cfg.init_diam_sigma_ln))
        if cfg.init_diam_min_cm <= diam0 <= cfg.init_diam_max_cm:
            break
    return group, alpha_r, rho, beta_c, diam0


def simulate_tumor(cfg: TumorConfig) -> Dataset:
    """Simulate tumor-volume trajectories; the oracle confounder is the
    one-hot subgroup label. Trajectories are truncated (and flagged) once
    the volume crosses the death threshold or leaves the valid range."""
    k_capacity = float(volume_from_diameter(cfg.k_capacity_diam_cm))
    death_volume = float(volume_from_diameter(cfg.death_diam_cm))
    decay = 0.5 ** (1.0 / cfg.chemo_half_life_days)

    patients = []
    dropped = 0
    for i in range(cfg.n_patients):
        rng = stream(cfg.seed, "patient", i)
        group, alpha_r, rho, beta_c, diam0 = _draw_patient_params(cfg, rng)
        beta_r = alpha_r / cfg.alpha_beta_ratio
        noise = rng.normal(0.0, cfg.noise_std, size=cfg.max_t)
        u_chemo = rng.random(cfg.max_t)
        u_radio = rng.random(cfg.max_t)

        v = float(volume_from_diameter(diam0))
        conc = 0.0
        diams = []
        xs, acts, ys = [], [], []
        truncated = False
        for t in range(cfg.max_t):
            diams.append(float(diameter_from_volume(v)))
            window = diams[-cfg.assign_window:]
            davg = float(np.mean(window))
            a_c = float(u_chemo[t] < sigmoid(cfg.chemo_slope * (davg - cfg.chemo_ref_diam_cm)))
            a_r = float(u_radio[t] < sigmoid(cfg.radio_slope * (davg - cfg.radio_ref_diam_cm)))
            conc = conc * decay + cfg.chemo_amount * a_c
            dose = cfg.radio_dose * a_r
            growth = rho * np.log(k_capacity / v)
            v_next = (1.0 + growth - beta_c * conc - (alpha_r * dose + beta_r * dose ** 2) + noise[t]) * v
            if not np.isfinite(v_next) or v_next <= 0.0:
                truncated = True
                break
            xs.append([v])
            acts.append([a_c, a_r])
            ys.append(v_next)
            v = v_next
            if v >= death_volume:
                truncated = True
                break
        if not xs:
            dropped += 1
            continue
        t_len = len(xs)
        z = np.zeros((t_len, 3))
        z[:, group - 1] = 1.0
        patients.append(PatientTrajectory(
            x=np.asarray(xs),
            a=np.asarray(acts),
            y=np.asarray(ys),
            z=z,
            group=group,
            truncated=truncated,
        ))
    meta = {
        "generator": "tumor-pkpd",
        "config": asdict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "dropped_patients": dropped,
    }
    return Dataset(patients=patients, k=2, cov_dim=1, meta=meta)
