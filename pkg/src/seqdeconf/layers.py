"""Hand-written forward/backward passes for the fixed model topologies:
dense layers, an LSTM cell, sigmoid cross-entropy, and weighted squared
error. No general tape; each model wires these together explicitly and the
finite-difference oracle in numerics.py checks the result.

Gate layout inside the fused LSTM weight matrices is [i | f | g | o]
(input, forget, candidate, output), each a width-H block.
"""

from __future__ import annotations

import numpy as np

from .numerics import sigmoid


def init_dense(rng, fan_in: int, fan_out: int):
    """Uniform init scaled by 1/sqrt(fan_in); zero bias."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = np.zeros(fan_out)
    return w, b


def init_lstm(rng, input_dim: int, hidden: int):
    """Fused-gate LSTM weights; forget-gate bias starts at 1.0."""
    wx, _ = init_dense(rng, input_dim, 4 * hidden)
    wh, _ = init_dense(rng, hidden, 4 * hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return wx, wh, b


def dense(x, w, b):
    return x @ w + b


def dense_bwd(dout, x, w):
    """Returns (dx, dw, db) for y = x @ w + b."""
    dx = dout @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dx, dw, db


def tanh_bwd(dout, out):
    return dout * (1.0 - out * out)


def lstm_step(x, h_prev, c_prev, wx, wh, b):
    """One LSTM step for a batch. Returns (h, c, cache)."""
    hidden = h_prev.shape[-1]
    gates = x @ wx + h_prev @ wh + b
    i = sigmoid(gates[:, :hidden])
    f = sigmoid(gates[:, hidden:2 * hidden])
    g = np.tanh(gates[:, 2 * hidden:3 * hidden])
    o = sigmoid(gates[:, 3 * hidden:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, i, f, g, o, tc)
    return h, c, cache


def lstm_step_bwd(dh, dc, cache, wx, wh):
    """Backward through one LSTM step.

    dh, dc are gradients flowing into this step's outputs (h, c).
    Returns (dx, dh_prev, dc_prev, dwx, dwh, db).
    """
    x, h_prev, c_prev, i, f, g, o, tc = cache
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    df = dc_total * c_prev
    dg = dc_total * i
    dc_prev = dc_total * f
    dgates = np.concatenate(
        [
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    dx = dgates @ wx.T
    dh_prev = dgates @ wh.T
    dwx = x.T @ dgates
    dwh = h_prev.T @ dgates
    db = dgates.sum(axis=0)
    return dx, dh_prev, dc_prev, dwx, dwh, db


def bce_logits(logits, targets):
    """Elementwise sigmoid cross-entropy from logits, overflow-safe."""
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def bce_logits_grad(logits, targets):
    return sigmoid(logits) - targets


def masked_mean(values, mask):
    """Mean of `values` over entries where `mask` (broadcastable) is 1."""
    mask = np.broadcast_to(mask, values.shape)
    total = float(mask.sum())
    if total == 0:
        raise ValueError("mask selects no entries")
    return float((values * mask).sum() / total)


def dropout_mask(rng, shape, rate: float):
    """Inverted dropout mask: zeros with prob `rate`, survivors scaled."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep
