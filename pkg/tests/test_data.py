import json

import numpy as np
import pytest

from seqdeconf.data import (
    Dataset,
    PatientTrajectory,
    load_dataset,
    pad_and_mask,
    remove_covariate,
    save_dataset,
    split_dataset,
    unpad,
)
from seqdeconf.numerics import stream


def make_dataset(n=12, k=2, cov_dim=3, t_lens=None, with_z=True, seed=0):
    rng = stream(seed, "fixture")
    patients = []
    for i in range(n):
        t = int(t_lens[i]) if t_lens is not None else int(rng.integers(3, 7))
        patients.append(PatientTrajectory(
            x=rng.normal(size=(t, cov_dim)),
            a=(rng.random((t, k)) < 0.5).astype(float),
            y=rng.normal(size=t),
            z=rng.normal(size=(t, 1)) if with_z else None,
            group=int(rng.integers(1, 4)),
        ))
    return Dataset(patients=patients, k=k, cov_dim=cov_dim, meta={"generator": "fixture"})


def test_trajectory_validation():
    with pytest.raises(ValueError):
        PatientTrajectory(x=np.zeros((3, 2)), a=np.zeros((4, 2)), y=np.zeros(3))
    with pytest.raises(ValueError):
        PatientTrajectory(x=np.zeros((3, 2)), a=np.full((3, 2), 0.5), y=np.zeros(3))
    with pytest.raises(ValueError):
        PatientTrajectory(x=np.zeros((3, 2)), a=np.zeros((3, 2)), y=np.array([0.0, np.inf, 0.0]))


def test_split_sizes_paper_scale():
    ds = make_dataset(n=5000, t_lens=[3] * 5000, with_z=False)
    train, val, test = split_dataset(ds, seed=1)
    assert (len(train), len(val), len(test)) == (4000, 500, 500)


def test_split_sizes_small():
    ds = make_dataset(n=10)
    train, val, test = split_dataset(ds, seed=1)
    assert (len(train), len(val), len(test)) == (8, 1, 1)


def test_split_deterministic_and_partition():
    for n in (10, 37, 101, 250):
        ds = make_dataset(n=n, t_lens=[3] * n, with_z=False, seed=n)
        ids = {id(p): i for i, p in enumerate(ds.patients)}
        a = split_dataset(ds, seed=5)
        b = split_dataset(ds, seed=5)
        got = []
        for part_a, part_b in zip(a, b):
            ia = [ids[id(p)] for p in part_a.patients]
            ib = [ids[id(p)] for p in part_b.patients]
            assert ia == ib
            got.extend(ia)
        assert sorted(got) == list(range(n))


def test_split_empty_part_raises():
    ds = make_dataset(n=5)
    with pytest.raises(ValueError):
        split_dataset(ds, fractions=(0.9, 0.05, 0.05), seed=0)


def test_pad_and_mask_shapes():
    ds = make_dataset(n=2, t_lens=[2, 3])
    batch = pad_and_mask(ds)
    assert batch.t_max == 3
    assert np.array_equal(batch.mask, np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 1.0]]))
    assert batch.x[0, 2].sum() == 0.0
    ds_eq = make_dataset(n=3, t_lens=[4, 4, 4])
    assert pad_and_mask(ds_eq).mask.all()


def test_pad_unpad_round_trip():
    ds = make_dataset(n=6)
    back = unpad(pad_and_mask(ds), meta=ds.meta)
    for p, q in zip(ds.patients, back.patients):
        assert np.array_equal(p.x, q.x)
        assert np.array_equal(p.a, q.a)
        assert np.array_equal(p.y, q.y)
        assert np.array_equal(p.z, q.z)


def test_save_load_round_trip(tmp_path):
    ds = make_dataset(n=5)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.k == ds.k and back.cov_dim == ds.cov_dim
    assert back.meta.get("generator") == "fixture"
    for p, q in zip(ds.patients, back.patients):
        assert np.array_equal(p.x, q.x)
        assert np.array_equal(p.a, q.a)
        assert np.array_equal(p.y, q.y)
        assert np.array_equal(p.z, q.z)
        assert p.group == q.group


def test_load_truncated_file_names_line(tmp_path):
    ds = make_dataset(n=3)
    path = tmp_path / "ds.jsonl"
    save_dataset(ds, path)
    text = path.read_text().splitlines()
    text[2] = text[2][: len(text[2]) // 2]  # chop a record in half
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(ValueError, match="line 3"):
        load_dataset(path)


def test_load_ignores_unknown_fields(tmp_path):
    rec = {
        "t_len": 2,
        "x": [[0.1], [0.2]],
        "a": [[1], [0]],
        "y": [0.5, 0.6],
        "future_field": {"nested": True},
    }
    path = tmp_path / "ds.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    ds = load_dataset(path)
    assert len(ds) == 1
    assert ds.patients[0].t_len == 2


def test_remove_covariate():
    ds = make_dataset(n=4, cov_dim=3)
    out = remove_covariate(ds, 0)
    assert out.cov_dim == 2
    for p, q in zip(ds.patients, out.patients):
        assert np.array_equal(q.x, p.x[:, 1:])
        assert np.array_equal(q.y, p.y)
        assert np.array_equal(q.a, p.a)
    # removing index 0 again acts on the already-shifted columns
    out2 = remove_covariate(out, 0)
    assert out2.cov_dim == 1
    assert np.array_equal(out2.patients[0].x, ds.patients[0].x[:, 2:])
    with pytest.raises(IndexError):
        remove_covariate(ds, 3)
