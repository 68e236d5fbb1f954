"""Sequential factor model of the joint treatment assignments.

An LSTM consumes the patient history (previous covariates, previous
treatments, its own previous substitute vector, and a trainable
initial-input vector at step one) and projects each hidden state to a
low-dimensional substitute confounder Z_t. k independent per-treatment
heads read only (X_t, Z_t), which enforces the factorized conditional
p(a_t1..a_tk | z_t, x_t) = prod_j p(a_tj | z_t, x_t) by construction.

Variational dropout (masks shared across the timesteps of a sequence,
resampled per sequence per epoch) makes the model a sampler: repeated
forward passes with fresh masks yield Monte-Carlo draws of Z and of
treatment probabilities, which drive the predictive checks, the replica
sampler, and the substitute-confounder estimates used downstream.

Variants:
  multitask-rnn  the model described above;
  plain-rnn      same recurrence, one joint head with k output neurons
                 (no factorization constraint);
  multitask-mlp  Z_t from a per-step feedforward net on (x_{t-1}, a_{t-1})
                 only, shared across timesteps, with per-step MC dropout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, PaddedBatch, PatientTrajectory, pad_and_mask
from .layers import (
    bce_logits,
    bce_logits_grad,
    dense,
    dense_bwd,
    dropout_mask,
    init_dense,
    init_lstm,
    lstm_step,
    lstm_step_bwd,
    tanh_bwd,
)
from .numerics import Adam, Params, clip_grad_norm, derive_seed, sigmoid, stream

VARIANTS = ("multitask-rnn", "plain-rnn", "multitask-mlp")


@dataclass
class FactorModelConfig:
    d_z: int = 1
    rnn_hidden: int = 64        # MLP hidden width for the multitask-mlp variant
    fc_hidden: int = 64
    dropout: float = 0.1
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 100
    variant: str = "multitask-rnn"
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_z < 1:
            raise ValueError("d_z must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass
class FactorModel:
    config: FactorModelConfig
    cov_dim: int
    k: int
    params: Params
    x_mean: np.ndarray
    x_std: np.ndarray
    train_log: dict = field(default_factory=dict)


@dataclass
class SubstituteSamples:
    """Per patient: draws[i] is (S, T_i, d_z); mask_seeds[s] generated draw s."""

    draws: list[np.ndarray]
    mask_seeds: list[int]

    def mean(self) -> list[np.ndarray]:
        return [d.mean(axis=0) for d in self.draws]


def init_params(cfg: FactorModelConfig, cov_dim: int, k: int) -> Params:
    rng = stream(cfg.seed, "init")
    h, f, dz = cfg.rnn_hidden, cfg.fc_hidden, cfg.d_z
    params: Params = {}
    if cfg.variant == "multitask-mlp":
        in_dim = cov_dim + k
        params["l0"] = rng.normal(0.0, 0.01, size=in_dim)
        params["w1"], params["b1"] = init_dense(rng, in_dim, h)
        params["w2"], params["b2"] = init_dense(rng, h, dz)
    else:
        in_dim = cov_dim + k + dz
        params["l0"] = rng.normal(0.0, 0.01, size=in_dim)
        params["wx"], params["wh"], params["b"] = init_lstm(rng, in_dim, h)
        params["wz"], params["bz"] = init_dense(rng, h, dz)
    head_in = cov_dim + dz
    if cfg.variant == "plain-rnn":
        params["head_w1"], params["head_b1"] = init_dense(rng, head_in, f)
        params["head_w2"], params["head_b2"] = init_dense(rng, f, k)
    else:
        for j in range(k):
            params[f"head{j}_w1"], params[f"head{j}_b1"] = init_dense(rng, head_in, f)
            params[f"head{j}_w2"], params[f"head{j}_b2"] = init_dense(rng, f, 1)
    return params


# ---------------------------------------------------------------------------
# dropout masks
# ---------------------------------------------------------------------------

def make_variational_masks(cfg: FactorModelConfig, cov_dim: int, k: int, n: int, rng, rate=None):
    """Per-sequence masks, shared across all timesteps of a sequence."""
    rate = cfg.dropout if rate is None else rate
    if cfg.variant == "multitask-mlp":
        return {}  # per-step MC masks are drawn in the forward pass instead
    return {
        "m_u": dropout_mask(rng, (n, cov_dim + k), rate),
        "m_h": dropout_mask(rng, (n, cfg.rnn_hidden), rate),
        "m_z": dropout_mask(rng, (n, cfg.d_z), rate),
    }


def _mlp_masks(cfg, n, t, rng, rate=None):
    rate = cfg.dropout if rate is None else rate
    return dropout_mask(rng, (n, t, cfg.rnn_hidden), rate)


def _head_masks(cfg, k, n, t, rng):
    """Per-step masks on the head hidden layers, used only at inference."""
    heads = 1 if cfg.variant == "plain-rnn" else k
    return dropout_mask(rng, (heads, n, t, cfg.fc_hidden), cfg.dropout)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _heads_forward(params, cfg, k, q, head_masks=None):
    """q: (B, T, cov_dim + d_z) -> logits (B, T, k) plus caches."""
    b, t, _ = q.shape
    qf = q.reshape(b * t, -1)
    caches = []
    if cfg.variant == "plain-rnn":
        h1 = np.tanh(dense(qf, params["head_w1"], params["head_b1"]))
        h1d = h1 if head_masks is None else h1 * head_masks[0].reshape(b * t, -1)
        logits = dense(h1d, params["head_w2"], params["head_b2"])
        caches.append((h1, h1d))
        return logits.reshape(b, t, k), caches
    cols = []
    for j in range(k):
        h1 = np.tanh(dense(qf, params[f"head{j}_w1"], params[f"head{j}_b1"]))
        h1d = h1 if head_masks is None else h1 * head_masks[j].reshape(b * t, -1)
        cols.append(dense(h1d, params[f"head{j}_w2"], params[f"head{j}_b2"]))
        caches.append((h1, h1d))
    return np.concatenate(cols, axis=1).reshape(b, t, k), caches


def _heads_backward(params, cfg, k, q, caches, dlogits, head_masks=None):
    """Returns (grads, dq) for the heads; dlogits is (B, T, k)."""
    b, t, _ = q.shape
    qf = q.reshape(b * t, -1)
    dq = np.zeros_like(qf)
    grads: Params = {}
    if cfg.variant == "plain-rnn":
        h1, h1d = caches[0]
        dl = dlogits.reshape(b * t, k)
        dh1d, grads["head_w2"], grads["head_b2"] = dense_bwd(dl, h1d, params["head_w2"])
        if head_masks is not None:
            dh1d = dh1d * head_masks[0].reshape(b * t, -1)
        dpre = tanh_bwd(dh1d, h1)
        dq_j, grads["head_w1"], grads["head_b1"] = dense_bwd(dpre, qf, params["head_w1"])
        dq += dq_j
        return grads, dq.reshape(b, t, -1)
    for j in range(k):
        h1, h1d = caches[j]
        dl = dlogits[:, :, j].reshape(b * t, 1)
        dh1d, grads[f"head{j}_w2"], grads[f"head{j}_b2"] = dense_bwd(dl, h1d, params[f"head{j}_w2"])
        if head_masks is not None:
            dh1d = dh1d * head_masks[j].reshape(b * t, -1)
        dpre = tanh_bwd(dh1d, h1)
        dq_j, grads[f"head{j}_w1"], grads[f"head{j}_b1"] = dense_bwd(dpre, qf, params[f"head{j}_w1"])
        dq += dq_j
    return grads, dq.reshape(b, t, -1)


def _forward(params, cfg, cov_dim, k, xb, ab, masks, head_masks=None, mlp_mask=None):
    """Full forward pass on standardized, zero-padded inputs.

    Returns (logits (B,T,k), z (B,T,d_z), cache) where z is the substitute
    sequence after its dropout mask (what the heads and the next-step
    input actually consume).
    """
    b, t = xb.shape[0], xb.shape[1]
    dz = cfg.d_z
    obs = np.concatenate([xb, ab], axis=2)
    if cfg.variant == "multitask-mlp":
        u = np.empty((b, t, obs.shape[2]))
        u[:, 0] = params["l0"]
        u[:, 1:] = obs[:, :-1]
        pre1 = dense(u.reshape(b * t, -1), params["w1"], params["b1"])
        h1 = np.tanh(pre1).reshape(b, t, -1)
        h1d = h1 if mlp_mask is None else h1 * mlp_mask
        z = dense(h1d.reshape(b * t, -1), params["w2"], params["b2"]).reshape(b, t, dz)
        q = np.concatenate([xb, z], axis=2)
        logits, head_caches = _heads_forward(params, cfg, k, q, head_masks)
        cache = {"u": u, "h1": h1, "h1d": h1d, "z": z, "q": q, "head_caches": head_caches}
        return logits, z, cache
    hidden = cfg.rnn_hidden
    m_u, m_h, m_z = masks["m_u"], masks["m_h"], masks["m_z"]
    obs_masked = obs * m_u[:, None, :]
    h = np.zeros((b, hidden))
    c = np.zeros((b, hidden))
    z_prev = np.zeros((b, dz))
    hs = np.empty((b, t, hidden))
    zs = np.empty((b, t, dz))
    step_caches = []
    for step in range(t):
        if step == 0:
            u = np.broadcast_to(params["l0"], (b, params["l0"].size))
        else:
            u = np.concatenate([obs_masked[:, step - 1], z_prev], axis=1)
        h_in = h * m_h
        h, c, cache_t = lstm_step(u, h_in, c, params["wx"], params["wh"], params["b"])
        z_t = dense(h, params["wz"], params["bz"]) * m_z
        hs[:, step] = h
        zs[:, step] = z_t
        step_caches.append(cache_t)
        z_prev = z_t
    q = np.concatenate([xb, zs], axis=2)
    logits, head_caches = _heads_forward(params, cfg, k, q, head_masks)
    cache = {"hs": hs, "zs": zs, "q": q, "step_caches": step_caches, "head_caches": head_caches}
    return logits, zs, cache


def _backward(params, cfg, cov_dim, k, xb, ab, masks, cache, dlogits, head_masks=None, mlp_mask=None):
    b, t = xb.shape[0], xb.shape[1]
    dz_dim = cfg.d_z
    grads, dq = _heads_backward(params, cfg, k, cache["q"], cache["head_caches"], dlogits, head_masks)
    dzs = dq[:, :, cov_dim:]
    if cfg.variant == "multitask-mlp":
        h1, h1d, u = cache["h1"], cache["h1d"], cache["u"]
        dzf = dzs.reshape(b * t, dz_dim)
        dh1d, grads["w2"], grads["b2"] = dense_bwd(dzf, h1d.reshape(b * t, -1), params["w2"])
        if mlp_mask is not None:
            dh1d = dh1d * mlp_mask.reshape(b * t, -1)
        dpre = tanh_bwd(dh1d, h1.reshape(b * t, -1))
        du, grads["w1"], grads["b1"] = dense_bwd(dpre, u.reshape(b * t, -1), params["w1"])
        grads["l0"] = du.reshape(b, t, -1)[:, 0].sum(axis=0)
        return grads
    hidden = cfg.rnn_hidden
    m_h, m_z = masks["m_h"], masks["m_z"]
    hs = cache["hs"]
    for name in ("wx", "wh", "b", "wz", "bz", "l0"):
        grads[name] = np.zeros_like(params[name])
    dh_next = np.zeros((b, hidden))
    dc_next = np.zeros((b, hidden))
    dz_in_next = np.zeros((b, dz_dim))
    obs_width = cov_dim + k
    for step in reversed(range(t)):
        dz_masked = dzs[:, step] + dz_in_next
        dz_pre = dz_masked * m_z
        dh = dh_next + dz_pre @ params["wz"].T
        grads["wz"] += hs[:, step].T @ dz_pre
        grads["bz"] += dz_pre.sum(axis=0)
        du, dh_prev_masked, dc_prev, dwx, dwh, db = lstm_step_bwd(
            dh, dc_next, cache["step_caches"][step], params["wx"], params["wh"])
        grads["wx"] += dwx
        grads["wh"] += dwh
        grads["b"] += db
        if step == 0:
            grads["l0"] += du.sum(axis=0)
            dz_in_next = np.zeros((b, dz_dim))
        else:
            dz_in_next = du[:, obs_width:]
        dh_next = dh_prev_masked * m_h
        dc_next = dc_prev
    return grads


def masked_bce(logits, targets, mask):
    """Mean per-treatment sigmoid cross-entropy over active steps."""
    elems = bce_logits(logits, targets) * mask[:, :, None]
    denom = float(mask.sum()) * logits.shape[2]
    return float(elems.sum() / denom)


def loss_and_grads(params, cfg, cov_dim, k, xb, ab, mask, masks, head_masks=None, mlp_mask=None):
    """Masked-mean BCE over all heads plus its gradients. Dropout masks are
    inputs, so the map params -> loss is deterministic (the property the
    finite-difference oracle needs)."""
    logits, _, cache = _forward(params, cfg, cov_dim, k, xb, ab, masks, head_masks, mlp_mask)
    loss = masked_bce(logits, ab, mask)
    denom = float(mask.sum()) * k
    dlogits = bce_logits_grad(logits, ab) * mask[:, :, None] / denom
    grads = _backward(params, cfg, cov_dim, k, xb, ab, masks, cache, dlogits, head_masks, mlp_mask)
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _fit_scaler(batch: PaddedBatch):
    mask = batch.mask[:, :, None]
    total = mask.sum()
    mean = (batch.x * mask).sum(axis=(0, 1)) / total
    var = (((batch.x - mean) ** 2) * mask).sum(axis=(0, 1)) / total
    std = np.sqrt(var)
    std[std < 1e-8] = 1.0
    return mean, std


def _standardize(batch: PaddedBatch, mean, std):
    return ((batch.x - mean) / std) * batch.mask[:, :, None]


def _eval_loss(params, cfg, cov_dim, k, xb, ab, mask):
    ones = make_variational_masks(cfg, cov_dim, k, xb.shape[0], stream(0, "noop"), rate=0.0)
    logits, _, _ = _forward(params, cfg, cov_dim, k, xb, ab, ones)
    return masked_bce(logits, ab, mask)


def train_factor_model(train: Dataset, val: Dataset, cfg: FactorModelConfig) -> FactorModel:
    """Adam training of the masked multi-head BCE for cfg.epochs epochs.

    Variational dropout masks are resampled per sequence per epoch; the
    parameters from the best validation epoch (evaluated with dropout off)
    are the ones retained.
    """
    tb = pad_and_mask(train)
    vb = pad_and_mask(val)
    cov_dim, k = train.cov_dim, train.k
    mean, std = _fit_scaler(tb)
    xt = _standardize(tb, mean, std)
    xv = _standardize(vb, mean, std)
    params = init_params(cfg, cov_dim, k)
    opt = Adam(lr=cfg.learning_rate)
    n = tb.n
    log = {"train_loss": [], "val_loss": [], "best_epoch": None}
    best_val = np.inf
    best_params = {name: p.copy() for name, p in params.items()}
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        epoch_weight = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, ab, mb = xt[idx], tb.a[idx], tb.mask[idx]
            mask_rng = stream(cfg.seed, "mask", epoch, start)
            masks = make_variational_masks(cfg, cov_dim, k, len(idx), mask_rng)
            mlp_mask = None
            if cfg.variant == "multitask-mlp":
                mlp_mask = _mlp_masks(cfg, len(idx), xb.shape[1], mask_rng)
            loss, grads = loss_and_grads(params, cfg, cov_dim, k, xb, ab, mb, masks, mlp_mask=mlp_mask)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch start {start}")
            if cfg.max_grad_norm is not None:
                grads = clip_grad_norm(grads, cfg.max_grad_norm)
            params = opt.step(params, grads)
            w = float(mb.sum())
            epoch_loss += loss * w
            epoch_weight += w
        val_loss = _eval_loss(params, cfg, cov_dim, k, xv, vb.a, vb.mask)
        log["train_loss"].append(epoch_loss / epoch_weight)
        log["val_loss"].append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {name: p.copy() for name, p in params.items()}
            log["best_epoch"] = epoch
    return FactorModel(
        config=cfg, cov_dim=cov_dim, k=k, params=best_params,
        x_mean=mean, x_std=std, train_log=log,
    )


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _draw_forward(model: FactorModel, batch: PaddedBatch, mask_seed: int,
                  with_heads: bool, dropout: bool = True):
    cfg = model.config
    xb = _standardize(batch, model.x_mean, model.x_std)
    rng = stream(mask_seed, "inference-masks")
    rate = cfg.dropout if dropout else 0.0
    masks = make_variational_masks(cfg, model.cov_dim, model.k, batch.n, rng, rate=rate)
    mlp_mask = None
    if cfg.variant == "multitask-mlp":
        mlp_mask = _mlp_masks(cfg, batch.n, batch.t_max, rng, rate=rate)
    head_masks = None
    if with_heads and rate > 0.0:
        head_masks = _head_masks(cfg, model.k, batch.n, batch.t_max, rng)
    logits, z, _ = _forward(model.params, cfg, model.cov_dim, model.k, xb, batch.a,
                            masks, head_masks, mlp_mask)
    return logits, z


def infer_z_batch(model: FactorModel, batch: PaddedBatch, mask_seed: int, dropout=True) -> np.ndarray:
    """One substitute-confounder draw for a padded batch: (N, T_max, d_z)."""
    _, z = _draw_forward(model, batch, mask_seed, with_heads=False, dropout=dropout)
    return z * batch.mask[:, :, None]


def predict_probs_batch(model: FactorModel, batch: PaddedBatch, mask_seed: int, dropout=True) -> np.ndarray:
    """One treatment-probability draw for a padded batch: (N, T_max, k)."""
    logits, _ = _draw_forward(model, batch, mask_seed, with_heads=True, dropout=dropout)
    return sigmoid(logits)


def _single_batch(trajectory: PatientTrajectory, cov_dim: int, k: int) -> PaddedBatch:
    if trajectory.t_len == 0:
        raise ValueError("empty trajectory")
    return PaddedBatch(
        x=trajectory.x[None], a=trajectory.a[None], y=trajectory.y[None],
        mask=np.ones((1, trajectory.t_len)),
    )


def forward_infer_z(model: FactorModel, trajectory: PatientTrajectory, mask_seed: int) -> np.ndarray:
    """One Monte-Carlo draw of the substitute sequence for one patient,
    (T, d_z). Depends only on inputs before each step plus the masks."""
    return infer_z_batch(model, _single_batch(trajectory, model.cov_dim, model.k), mask_seed)[0]


def predict_treatment_probs(model: FactorModel, trajectory: PatientTrajectory, mask_seed: int) -> np.ndarray:
    """Per-step treatment probabilities sigma(head_j(X_t, Z_t)), (T, k)."""
    return predict_probs_batch(model, _single_batch(trajectory, model.cov_dim, model.k), mask_seed)[0]


def infer_substitutes(model: FactorModel, ds: Dataset, n_draws: int = 10, seed: int = 0) -> SubstituteSamples:
    """S Monte-Carlo substitute draws for every patient in ds."""
    batch = pad_and_mask(ds)
    seeds = [derive_seed(seed, "z-draw", s) for s in range(n_draws)]
    stacked = np.stack([infer_z_batch(model, batch, ms) for ms in seeds])  # (S, N, T, dz)
    lengths = batch.lengths
    draws = [stacked[:, i, :lengths[i], :].copy() for i in range(batch.n)]
    return SubstituteSamples(draws=draws, mask_seeds=seeds)


def sample_treatment_replicas(model: FactorModel, ds: Dataset, m: int, seed: int):
    """M treatment replicas for ds: each uses a fresh dropout draw of the
    probabilities, then Bernoulli sampling per (patient, step, treatment).
    Returns (replicas list of (N, T_max, k), batch)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    batch = pad_and_mask(ds)
    replicas = []
    for r in range(m):
        probs = predict_probs_batch(model, batch, derive_seed(seed, "replica-mask", r))
        u = stream(seed, "replica-bern", r).random(probs.shape)
        replicas.append(((u < probs) * batch.mask[:, :, None]).astype(float))
    return replicas, batch


# ---------------------------------------------------------------------------
# checkpoints and random search
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: FactorModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "cov_dim": model.cov_dim,
        "k": model.k,
        "train_log": model.train_log,
    }
    arrays = {f"param.{name}": arr for name, arr in model.params.items()}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             x_mean=model.x_mean, x_std=model.x_std, **arrays)


def load_checkpoint(path) -> FactorModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        cfg_dict = meta["config"]
        if cfg_dict.get("max_grad_norm") is not None:
            cfg_dict["max_grad_norm"] = float(cfg_dict["max_grad_norm"])
        cfg = FactorModelConfig(**cfg_dict)
        params = {name[len("param."):]: data[name] for name in data.files
                  if name.startswith("param.")}
        return FactorModel(
            config=cfg, cov_dim=meta["cov_dim"], k=meta["k"], params=params,
            x_mean=data["x_mean"], x_std=data["x_std"], train_log=meta["train_log"],
        )


def default_search_space(variant: str = "multitask-rnn") -> dict:
    space = {
        "learning_rate": [0.01, 0.001, 0.0001],
        "batch_size": [64, 128, 256],
        "rnn_hidden": [32, 64, 128, 256],
        "fc_hidden": [32, 64, 128],
        "dropout": [0.1, 0.2, 0.3, 0.4, 0.5],
    }
    if variant == "plain-rnn":
        space["max_grad_norm"] = [1.0, 2.0, 4.0]
    return space


def random_search(train: Dataset, val: Dataset, space: dict, iterations: int = 30,
                  seed: int = 0, base: FactorModelConfig | None = None):
    """Uniform random search over the grid; repeated draws are not
    re-evaluated. Returns (best_config, trials) where trials is the full
    log of distinct evaluations."""
    base = base or FactorModelConfig()
    rng = stream(seed, "search")
    seen = set()
    trials = []
    best = None
    for _ in range(iterations):
        choice = {name: values[rng.integers(len(values))] for name, values in space.items()}
        key = tuple(sorted(choice.items()))
        if key in seen:
            continue
        seen.add(key)
        cfg = FactorModelConfig(**{**asdict(base), **choice})
        try:
            model = train_factor_model(train, val, cfg)
            val_loss = min(model.train_log["val_loss"])
        except RuntimeError as exc:
            trials.append({"config": asdict(cfg), "val_loss": None, "error": str(exc)})
            continue
        trials.append({"config": asdict(cfg), "val_loss": val_loss})
        if best is None or val_loss < best[0]:
            best = (val_loss, cfg)
    if best is None:
        raise RuntimeError("every random-search trial diverged")
    return best[1], trials
