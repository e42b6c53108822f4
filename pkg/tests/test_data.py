import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockpunch.data import Dataset, gen_synthetic
from blockpunch.training import TrainConfig, accuracy, init_params, train


def digest(ds):
    return hashlib.sha256(ds.x.tobytes() + ds.y.tobytes()).hexdigest()


def test_same_seed_same_bytes():
    assert digest(gen_synthetic(3, 64)) == digest(gen_synthetic(3, 64))
    assert digest(gen_synthetic(3, 64)) != digest(gen_synthetic(4, 64))


@given(st.integers(0, 2**32 - 1), st.integers(1, 301))
def test_classes_balanced_within_one(seed, size):
    counts = np.bincount(gen_synthetic(seed, size).y, minlength=2)
    assert abs(int(counts[0]) - int(counts[1])) <= 1


def test_shapes_and_types():
    ds = gen_synthetic(0, 10, image=6, channels=3)
    assert ds.x.shape == (10, 3, 6, 6) and ds.x.dtype == np.float32 and ds.y.dtype == np.int64
    tr, te = ds.split(7)
    assert len(tr) == 7 and len(te) == 3


def test_save_load_round_trip(tmp_path):
    ds = gen_synthetic(1, 20)
    ds.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert digest(back) == digest(ds)


def test_difficulty_lowers_signal_to_noise():
    easy, hard = gen_synthetic(0, 200, 0.0), gen_synthetic(0, 200, 1.0)
    assert easy.x[:, 0].max(axis=(1, 2)).mean() / easy.x.std() > hard.x[:, 0].max(axis=(1, 2)).mean() / hard.x.std()


@pytest.mark.slow
def test_dense_baseline_is_accurate(toy):
    ds = gen_synthetic(0, 1600)
    train_set, test_set = ds.split(1200)
    params, _ = train(toy, init_params(toy, 0), train_set.as_tuple(), TrainConfig(15, seed=0))
    assert accuracy(toy, params, test_set.as_tuple()) >= 0.95
