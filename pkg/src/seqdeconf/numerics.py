"""Deterministic numeric foundation: stable sigmoid, Adam, seeded RNG
streams, and a central finite-difference gradient oracle.

Everything runs in double precision. All randomness flows through
:func:`stream`, which derives independent counter-based generators from a
64-bit seed plus a tag path, so serial and parallel runs agree.
"""

from __future__ import annotations

import hashlib

import numpy as np

Params = dict[str, np.ndarray]


def sigmoid(x):
    """Numerically stable logistic function, elementwise.

    Saturates to 0/1 for large |x| instead of overflowing; never NaN for
    finite input.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent random stream keyed by (seed, *tags).

    Uses a Philox counter-based generator with a 128-bit key derived from
    the seed and the tag path, so child streams for e.g. ("patient", 17) or
    ("mask", epoch, batch) are mutually independent and identical across
    runs and platforms.
    """
    label = str(int(seed)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    key = int.from_bytes(digest, "little")
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit child seed for (seed, *tags); same scheme as stream()."""
    label = str(int(seed)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class Adam:
    """Adam optimizer with bias correction over a dict of parameter arrays.

    Moment estimates are kept per parameter name and stay shape-congruent
    with the parameters; the step counter increases by one per update.
    """

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Params = {}
        self.v: Params = {}

    def step(self, params: Params, grads: Params) -> Params:
        """One Adam update; returns new parameter arrays (inputs untouched)."""
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name!r} shape {p.shape}"
                )
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out: Params = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name] = m
            self.v[name] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[name] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def clip_grad_norm(grads: Params, max_norm: float) -> Params:
    """Scale grads so their global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def finite_diff_grad(loss_fn, params: Params, h: float = 1e-5) -> Params:
    """Central-difference gradient of loss_fn at params, per coordinate.

    loss_fn must be deterministic (freeze any dropout masks before calling).
    Raises ValueError if any perturbed loss evaluates non-finite.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads: Params = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=float)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            lp = loss_fn(params)
            flat_p[i] = orig - h
            lm = loss_fn(params)
            flat_p[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError(
                    f"non-finite loss while differencing {name!r}[{i}]"
                )
            flat_g[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def max_rel_err(analytic: Params, numeric: Params, floor: float = 1e-4) -> float:
    """Max relative disagreement between two gradient dicts.

    Coordinates where both gradients are below `floor` in magnitude are
    compared against the floor, so a pair of near-zero gradients cannot
    dominate the ratio through rounding noise.
    """
    worst = 0.0
    for name in analytic:
        ga = analytic[name]
        gn = numeric[name]
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), floor)
        worst = max(worst, float(np.max(np.abs(ga - gn) / denom)))
    return worst
