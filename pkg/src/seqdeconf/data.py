"""Canonical dataset representation shared by the simulators, the factor
model, and the outcome models: per-patient trajectories, train/val/test
splitting, zero-padding with masks, and JSON-lines persistence.

Index convention: y[t] stores the outcome observed *after* the treatments
at step t (a one-step-ahead response), so x, a, y and the optional oracle
confounders all share the leading length T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import stream


@dataclass
class PatientTrajectory:
    """One patient: covariates x (T, cov_dim), binary treatments a (T, k),
    one-step-ahead outcomes y (T,), optional simulated confounders
    z (T, d_true), optional static subgroup label, and a flag marking
    trajectories cut short by the simulator."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    group: int | None = None
    truncated: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.x.ndim != 2 or self.a.ndim != 2 or self.y.ndim != 1:
            raise ValueError("x and a must be 2-D, y 1-D")
        t = self.x.shape[0]
        if self.a.shape[0] != t or self.y.shape[0] != t:
            raise ValueError("x, a, y must share leading length T")
        if not np.isin(self.a, (0.0, 1.0)).all():
            raise ValueError("treatments must be binary")
        if not np.isfinite(self.y).all():
            raise ValueError("outcomes must be finite")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=float)
            if self.z.ndim != 2 or self.z.shape[0] != t:
                raise ValueError("z must be (T, d_true)")

    @property
    def t_len(self) -> int:
        return self.x.shape[0]


@dataclass
class Dataset:
    """Homogeneous collection of trajectories plus provenance metadata."""

    patients: list[PatientTrajectory]
    k: int
    cov_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.patients:
            if p.a.shape[1] != self.k or p.x.shape[1] != self.cov_dim:
                raise ValueError("patient dims do not match dataset k/cov_dim")

    def __len__(self) -> int:
        return len(self.patients)

    @property
    def has_oracle_z(self) -> bool:
        return all(p.z is not None for p in self.patients)


@dataclass
class PaddedBatch:
    """Zero-padded arrays with a prefix mask: mask[i, t] = 1 iff t < T_i.

    Padded entries are exactly zero and must never influence a loss.
    """

    x: np.ndarray  # (N, T_max, cov_dim)
    a: np.ndarray  # (N, T_max, k)
    y: np.ndarray  # (N, T_max)
    mask: np.ndarray  # (N, T_max)
    z: np.ndarray | None = None  # (N, T_max, d) when every patient has z

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def t_max(self) -> int:
        return self.x.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(int)


def split_dataset(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Random disjoint/exhaustive (train, val, test) partition.

    Cut points use floor on the val/test fractions; the remainder goes to
    training, so 5000 patients at (0.8, 0.1, 0.1) give 4000/500/500.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(ds)
    n_val = int(np.floor(n * fractions[1]))
    n_test = int(np.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} patients leaves an empty part")
    order = stream(seed, "split").permutation(n)
    parts = (
        order[:n_train],
        order[n_train:n_train + n_val],
        order[n_train + n_val:],
    )
    out = []
    for idx in parts:
        out.append(Dataset(
            patients=[ds.patients[i] for i in idx],
            k=ds.k,
            cov_dim=ds.cov_dim,
            meta=dict(ds.meta),
        ))
    return tuple(out)


def pad_and_mask(ds: Dataset) -> PaddedBatch:
    """Zero-pad all trajectories to the max length with a prefix mask."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    n = len(ds)
    t_max = max(p.t_len for p in ds.patients)
    x = np.zeros((n, t_max, ds.cov_dim))
    a = np.zeros((n, t_max, ds.k))
    y = np.zeros((n, t_max))
    mask = np.zeros((n, t_max))
    with_z = ds.has_oracle_z
    z = None
    if with_z:
        d = ds.patients[0].z.shape[1]
        z = np.zeros((n, t_max, d))
    for i, p in enumerate(ds.patients):
        t = p.t_len
        x[i, :t] = p.x
        a[i, :t] = p.a
        y[i, :t] = p.y
        mask[i, :t] = 1.0
        if with_z:
            z[i, :t] = p.z
    return PaddedBatch(x=x, a=a, y=y, mask=mask, z=z)


def unpad(batch: PaddedBatch, meta: dict | None = None) -> Dataset:
    """Inverse of pad_and_mask (group labels are not carried by batches)."""
    patients = []
    for i, t in enumerate(batch.lengths):
        z = batch.z[i, :t].copy() if batch.z is not None else None
        patients.append(PatientTrajectory(
            x=batch.x[i, :t].copy(),
            a=batch.a[i, :t].copy(),
            y=batch.y[i, :t].copy(),
            z=z,
        ))
    return Dataset(
        patients=patients,
        k=batch.a.shape[2],
        cov_dim=batch.x.shape[2],
        meta=dict(meta or {}),
    )


def save_dataset(ds: Dataset, path) -> None:
    """Write JSON lines: a leading {"_meta": ...} record, then one patient
    per line with keys t_len, x, a, y and optional z, group, truncated.
    Numbers keep full double precision via repr."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"_meta": {"k": ds.k, "cov_dim": ds.cov_dim, **ds.meta}}
        fh.write(json.dumps(header) + "\n")
        for p in ds.patients:
            rec = {
                "t_len": p.t_len,
                "x": p.x.tolist(),
                "a": p.a.astype(int).tolist(),
                "y": p.y.tolist(),
            }
            if p.z is not None:
                rec["z"] = p.z.tolist()
            if p.group is not None:
                rec["group"] = int(p.group)
            if p.truncated:
                rec["truncated"] = True
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    """Read the JSON-lines format; unknown keys are ignored for forward
    compatibility. Malformed records raise with their line number."""
    patients = []
    meta: dict = {}
    k = cov_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: malformed JSON on line {lineno}: {exc}") from None
            if "_meta" in rec:
                meta = dict(rec["_meta"])
                k = meta.pop("k", None)
                cov_dim = meta.pop("cov_dim", None)
                continue
            try:
                patients.append(PatientTrajectory(
                    x=np.asarray(rec["x"], dtype=float),
                    a=np.asarray(rec["a"], dtype=float),
                    y=np.asarray(rec["y"], dtype=float),
                    z=np.asarray(rec["z"], dtype=float) if "z" in rec else None,
                    group=rec.get("group"),
                    truncated=bool(rec.get("truncated", False)),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad patient record on line {lineno}: {exc}") from None
    if not patients:
        raise ValueError(f"{path}: no patient records")
    if k is None:
        k = patients[0].a.shape[1]
    if cov_dim is None:
        cov_dim = patients[0].x.shape[1]
    return Dataset(patients=patients, k=int(k), cov_dim=int(cov_dim), meta=meta)


def remove_covariate(ds: Dataset, j: int) -> Dataset:
    """Drop covariate column j from every patient; treatments, outcomes and
    oracle confounders are untouched. Column indices above j shift down by
    one in the result, so repeated removal acts on the shifted layout."""
    if not 0 <= j < ds.cov_dim:
        raise IndexError(f"covariate index {j} out of range for dim {ds.cov_dim}")
    patients = [
        PatientTrajectory(
            x=np.delete(p.x, j, axis=1),
            a=p.a.copy(),
            y=p.y.copy(),
            z=None if p.z is None else p.z.copy(),
            group=p.group,
            truncated=p.truncated,
        )
        for p in ds.patients
    ]
    meta = dict(ds.meta)
    meta["removed_covariate"] = meta.get("removed_covariate", []) + [j]
    return Dataset(patients=patients, k=ds.k, cov_dim=ds.cov_dim - 1, meta=meta)
