"""Dataset generation, noise injection, container IO, splits, batches."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from pcsr.data import (PairDataset, batch_iter, dataset_from_features,
                       generate_synthetic, inject_noise, load_dataset,
                       load_features_csv, save_dataset, split_indices)
from pcsr.errors import (ConfigurationError, DegenerateInputError, FormatError)


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def test_zero_jitter_collapses_to_prototypes():
    ds = generate_synthetic(50, 5, d_img=8, d_txt=8, intra_class_noise=0.0, seed=3)
    for cls in range(5):
        rows = ds.image_feats[ds.latent_class == cls]
        if len(rows) > 1:
            assert np.allclose(rows, rows[0], atol=1e-12)


def test_linear_probe_separability():
    # independent oracle: a multinomial logistic probe must read the class
    # structure straight off the raw image features
    ds = generate_synthetic(2000, 32, intra_class_noise=0.3, seed=42)
    half = 1000
    probe = LogisticRegression(max_iter=2000, random_state=0)
    probe.fit(ds.image_feats[:half], ds.latent_class[:half])
    acc = probe.score(ds.image_feats[half:], ds.latent_class[half:])
    assert acc >= 0.95


def test_single_class_is_chance_level():
    ds = generate_synthetic(20, 1, d_img=4, d_txt=4, seed=0)
    assert (ds.latent_class == 0).all()


def test_generator_deterministic():
    a = generate_synthetic(30, 3, seed=9)
    b = generate_synthetic(30, 3, seed=9)
    assert np.array_equal(a.image_feats, b.image_feats)
    assert np.array_equal(a.text_feats, b.text_feats)


def test_generator_validation():
    with pytest.raises(ConfigurationError):
        generate_synthetic(5, 10)
    with pytest.raises(ConfigurationError):
        generate_synthetic(10, 2, d_img=0)
    with pytest.raises(ConfigurationError):
        generate_synthetic(10, 2, intra_class_noise=-0.1)


def test_multi_caption_layout():
    ds = generate_synthetic(10, 2, captions_per_image=3, seed=1)
    assert ds.n_texts == 30
    assert np.array_equal(ds.caption_indices(2), [6, 7, 8])
    assert ds.image_of_caption(7) == 2


# ---------------------------------------------------------------------------
# noise injection
# ---------------------------------------------------------------------------

def test_inject_zero_ratio_is_identity():
    ds = generate_synthetic(40, 4, seed=5)
    noisy = inject_noise(ds, 0.0, seed=5)
    assert np.array_equal(noisy.pair_of, ds.pair_of)
    assert not noisy.corruption_mask.any()


def test_inject_exact_count_and_all_mismatched():
    ds = generate_synthetic(1000, 8, seed=5)
    noisy = inject_noise(ds, 0.4, seed=5)
    assert noisy.corruption_mask.sum() == 400
    assert ds.corruption_mask.sum() == 0  # original untouched


def test_inject_features_shared_not_copied():
    ds = generate_synthetic(40, 4, seed=5)
    noisy = inject_noise(ds, 0.5, seed=5)
    assert noisy.image_feats is ds.image_feats
    assert np.array_equal(np.sort(noisy.pair_of), np.sort(ds.pair_of))


def test_inject_deterministic():
    ds = generate_synthetic(100, 4, seed=5)
    a = inject_noise(ds, 0.3, seed=11)
    b = inject_noise(ds, 0.3, seed=11)
    assert np.array_equal(a.pair_of, b.pair_of)


def test_inject_single_pair_rejected():
    ds = generate_synthetic(10, 2, seed=0)
    with pytest.raises(ConfigurationError):
        inject_noise(ds, 0.15, seed=0)  # floor(1.5) == 1


def test_inject_ratio_range():
    ds = generate_synthetic(10, 2, seed=0)
    with pytest.raises(ConfigurationError):
        inject_noise(ds, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 200), st.floats(0.0, 0.9), st.integers(0, 100))
def test_inject_count_matches_floor(n, ratio, seed):
    k = int(np.floor(ratio * n))
    if k == 1:
        return
    ds = generate_synthetic(n, 2, d_img=3, d_txt=3, seed=seed)
    noisy = inject_noise(ds, ratio, seed=seed)
    assert noisy.corruption_mask.sum() == k


# ---------------------------------------------------------------------------
# container IO
# ---------------------------------------------------------------------------

def test_save_load_round_trip_bit_exact(tmp_path):
    ds = inject_noise(generate_synthetic(60, 4, seed=7), 0.25, seed=7)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.image_feats, ds.image_feats)
    assert np.array_equal(back.text_feats, ds.text_feats)
    assert np.array_equal(back.pair_of, ds.pair_of)
    assert np.array_equal(back.true_of, ds.true_of)
    assert np.array_equal(back.latent_class, ds.latent_class)
    assert back.meta["noise_ratio"] == 0.25


def test_save_twice_identical_bytes(tmp_path):
    ds = generate_synthetic(20, 2, seed=1)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(ds, a)
    save_dataset(ds, b)
    assert a.read_bytes() == b.read_bytes()


def test_truncated_file_reports_offset(tmp_path):
    ds = generate_synthetic(20, 2, seed=1)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    whole = path.read_bytes()
    path.write_bytes(whole[:len(whole) // 2])
    with pytest.raises(FormatError) as err:
        load_dataset(path)
    assert err.value.offset is not None


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTADATA" + b"\x00" * 64)
    with pytest.raises(FormatError) as err:
        load_dataset(path)
    assert err.value.offset == 0


def test_corrupt_header(tmp_path):
    ds = generate_synthetic(20, 2, seed=1)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[14] = ord("!")  # smash the JSON
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_dataset(path)


def test_empty_dataset_file_rejected(tmp_path):
    header = json.dumps({"schema": 1, "n_images": 0, "n_texts": 0, "d_img": 4,
                         "d_txt": 4, "captions_per_image": 1}).encode()
    path = tmp_path / "empty.bin"
    path.write_bytes(b"PCSRDS1\n" + np.uint32(len(header)).tobytes() + header)
    with pytest.raises(DegenerateInputError):
        load_dataset(path)


def test_trailing_garbage_rejected(tmp_path):
    ds = generate_synthetic(20, 2, seed=1)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError):
        load_dataset(path)


def test_csv_ingestion(tmp_path):
    path = tmp_path / "feats.csv"
    path.write_text("1.0,2.0,3.0\n4.0,5.0,6.0\n")
    arr = load_features_csv(path)
    assert arr.shape == (2, 3)
    assert arr.dtype == np.float64
    ds = dataset_from_features(arr, arr[:, :2])
    assert ds.n_images == 2 and ds.d_txt == 2


def test_csv_bad_contents(tmp_path):
    path = tmp_path / "feats.csv"
    path.write_text("1.0,oops\n")
    with pytest.raises(FormatError):
        load_features_csv(path)


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------

def test_split_disjoint_and_covering():
    split = split_indices(100, 0.1, 0.2, seed=4)
    assert split.covers(100)
    assert len(split.val) == 10 and len(split.test) == 20


def test_split_bad_fractions():
    with pytest.raises(ConfigurationError):
        split_indices(10, 0.5, 0.5)


def test_batch_sizes_with_remainder():
    batches = batch_iter(np.arange(10), 4, epoch=0, seed=0)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert np.array_equal(np.sort(np.concatenate(batches)), np.arange(10))


def test_batch_drops_singleton_tail():
    batches = batch_iter(np.arange(9), 4, epoch=0, seed=0)
    assert [len(b) for b in batches] == [4, 4]


def test_batches_keyed_by_seed_and_epoch():
    a = batch_iter(np.arange(20), 5, epoch=0, seed=1)
    b = batch_iter(np.arange(20), 5, epoch=0, seed=1)
    c = batch_iter(np.arange(20), 5, epoch=1, seed=1)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert any(not np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_size_validation():
    with pytest.raises(ConfigurationError):
        batch_iter(np.arange(4), 1, epoch=0, seed=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 50), st.integers(2, 16), st.integers(0, 50))
def test_batches_partition_indices(n, batch_size, seed):
    batches = batch_iter(np.arange(n), batch_size, epoch=0, seed=seed)
    flat = np.concatenate(batches) if batches else np.array([], dtype=np.int64)
    # every produced index is unique and came from the input
    assert len(np.unique(flat)) == len(flat)
    assert len(flat) >= n - (batch_size - 1)
    assert all(len(b) >= 2 for b in batches)
