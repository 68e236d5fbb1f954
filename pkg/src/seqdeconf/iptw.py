"""Stabilized inverse-probability-of-treatment weights shared by both
outcome models: per-step numerator/denominator densities of the observed
treatments, cumulative products within a patient, and percentile
truncation."""

from __future__ import annotations

import numpy as np

DENSITY_FLOOR = 1e-6


def observed_density(probs, a):
    """Density of the observed binary treatments under per-treatment
    probabilities, multiplied over the treatment axis. probs, a: (..., k)."""
    p = np.clip(probs, DENSITY_FLOOR, 1.0 - DENSITY_FLOOR)
    dens = np.where(a > 0.5, p, 1.0 - p)
    return dens.prod(axis=-1)


def cumulative_weights(sw, patient_index):
    """Cumulative product of per-step stabilized weights within each
    patient; rows must be grouped per patient in time order."""
    out = np.empty_like(sw)
    current = None
    running = 1.0
    for i, (w, pid) in enumerate(zip(sw, patient_index)):
        if pid != current:
            current = pid
            running = 1.0
        running *= w
        out[i] = running
    return out


def truncate_weights(w, percentiles=(1.0, 99.0)):
    """Clip weights at the given percentiles of their own distribution."""
    if percentiles is None:
        return w.copy(), (None, None)
    lo, hi = np.percentile(w, percentiles)
    return np.clip(w, lo, hi), (float(lo), float(hi))
