import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import label_entropy
from sifl.data import (
    LabelledDataset,
    dirichlet_partition,
    holdout_split,
    load_png_dir,
    mean_client_entropy,
    save_png_dir,
    synth_dataset,
)
from sifl.errors import InvalidConfigError, TooManyClientsError


def balanced_labels(classes=10, per=100):
    return np.repeat(np.arange(classes), per)


def test_single_client_gets_everything():
    labels = balanced_labels()
    p = dirichlet_partition(labels, 1, 0.5, 0)
    assert list(p.clients[0]) == list(range(len(labels)))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 30),
    st.sampled_from([0.01, 0.1, 1.0, 100.0]),
    st.integers(0, 2**32),
)
def test_partition_is_disjoint_and_nonempty(n_clients, alpha, seed):
    labels = np.random.default_rng(seed).integers(0, 5, 60)
    p = dirichlet_partition(labels, n_clients, alpha, seed)
    flat = np.concatenate(p.clients)
    assert len(flat) == len(set(flat.tolist())) <= 60
    assert set(flat.tolist()) <= set(range(60))
    assert all(len(c) > 0 for c in p.clients)


def test_partition_deterministic():
    labels = balanced_labels()
    a = dirichlet_partition(labels, 10, 1.0, 4)
    b = dirichlet_partition(labels, 10, 1.0, 4)
    assert a.to_json() == b.to_json()
    assert json.loads(a.to_json())["alpha"] == 1.0


def test_too_many_clients():
    with pytest.raises(TooManyClientsError):
        dirichlet_partition([0, 1, 0], 4, 1.0, 0)
    with pytest.raises(InvalidConfigError):
        dirichlet_partition([0, 1, 0], 2, 0.0, 0)


def test_large_alpha_is_near_uniform():
    labels = balanced_labels()
    for seed in range(5):
        p = dirichlet_partition(labels, 10, 100.0, seed)
        for c in range(10):
            shares = np.array([(labels[idx] == c).sum() for idx in p.clients]) / 100
            assert np.all(np.abs(shares - 0.1) <= 0.05)


def test_small_alpha_has_lower_label_entropy():
    labels = balanced_labels()

    def mean_entropy(alpha):
        vals = []
        for seed in range(5):
            p = dirichlet_partition(labels, 10, alpha, seed)
            vals += [label_entropy(np.bincount(labels[c], minlength=10)) for c in p.clients]
        return np.mean(vals)

    assert mean_entropy(0.1) < mean_entropy(100.0)


def test_mean_client_entropy_helper():
    labels = balanced_labels(4, 10)
    p = dirichlet_partition(labels, 1, 1.0, 0)
    assert abs(mean_client_entropy(labels, p, 4) - np.log(4)) < 1e-12


# --- holdout ----------------------------------------------------------------------------


def _ds(counts):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    return LabelledDataset(np.zeros((len(labels), 1, 2, 2), np.float32), labels, len(counts))


def test_holdout_sizes():
    train, val = holdout_split(_ds([100] * 10), 0.1, 0)
    assert (len(train), len(val)) == (900, 100)


def test_holdout_deterministic():
    ds = _ds([37, 52, 11])
    a = holdout_split(ds, 0.2, 3)[1].labels
    b = holdout_split(ds, 0.2, 3)[1].labels
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=6), st.floats(0.05, 0.6))
def test_holdout_stratification(counts, fraction):
    ds = _ds(counts)
    train, val = holdout_split(ds, fraction, 1)
    assert len(val) == round(fraction * len(ds))
    assert len(train) + len(val) == len(ds)
    per = np.bincount(val.labels, minlength=len(counts))
    for c, n in enumerate(counts):
        assert abs(per[c] - round(fraction * n)) <= 1


def test_holdout_rejects_bad_fraction():
    with pytest.raises(InvalidConfigError):
        holdout_split(_ds([4, 4]), 1.0, 0)


# --- synthetic data -----------------------------------------------------------------------


def test_high_separation_nearest_centroid():
    train, _ = synth_dataset(4, 100, 16, separation=0.95, seed=1)
    test, _ = synth_dataset(4, 100, 16, separation=0.95, seed=2, palette_seed=1)
    flat = train.inputs.reshape(len(train), -1)
    means = np.stack([flat[train.labels == c].mean(0) for c in range(4)])
    t = test.inputs.reshape(len(test), -1)
    pred = ((t[:, None, :] - means[None]) ** 2).sum(-1).argmin(1)
    assert (pred == test.labels).mean() >= 0.99


def test_synth_deterministic():
    a, ma = synth_dataset(3, 5, 8, seed=7, montage_grid=4)
    b, mb = synth_dataset(3, 5, 8, seed=7, montage_grid=4)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert ma.digest == mb.digest
    assert ma.pixels.shape == (32, 32, 3)


def test_palette_changes_montage_digest():
    _, a = synth_dataset(3, 5, 8, seed=7, palette_seed=1, montage_grid=4)
    _, b = synth_dataset(3, 5, 8, seed=7, palette_seed=2, montage_grid=4)
    assert a.digest != b.digest


def test_synth_needs_two_classes():
    with pytest.raises(InvalidConfigError):
        synth_dataset(1, 5)


def test_png_dir_roundtrip(tmp_path):
    ds, _ = synth_dataset(3, 4, 8, seed=0, montage_grid=2)
    save_png_dir(ds, tmp_path / "d")
    back = load_png_dir(tmp_path / "d", num_classes=3)
    assert np.array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.inputs, ds.inputs)


def test_montage_tile_size_and_blank_tiles():
    _, m = synth_dataset(3, 2, 8, seed=0, montage_grid=4, montage_tile=12, montage_blank=0.25)
    assert m.pixels.shape == (48, 48, 3)
    tiles = m.pixels.reshape(4, 12, 4, 12, 3).transpose(0, 2, 1, 3, 4).reshape(16, -1).astype(float)
    flat = [t for t in tiles if abs(t.mean() - 127) < 3 and t.std() < 12]
    assert len(flat) == 4
    with pytest.raises(InvalidConfigError):
        synth_dataset(3, 2, 8, montage_blank=1.0)
