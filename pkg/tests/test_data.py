"""Synthetic mixtures, Dirichlet partitioning, label stats, IDX parsing."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import data


# --- empirical_label_dist ----------------------------------------------------

def test_label_dist_example():
    d = data.empirical_label_dist(np.array([0, 0, 1, 2]), 3)
    np.testing.assert_array_equal(d, [0.5, 0.25, 0.25])


def test_label_dist_single_class_is_one_hot():
    d = data.empirical_label_dist(np.full(7, 2), 4)
    np.testing.assert_array_equal(d, [0, 0, 1, 0])


def test_label_dist_uniform():
    d = data.empirical_label_dist(np.tile(np.arange(5), 3), 5)
    np.testing.assert_allclose(d, 0.2)


def test_label_dist_rejects_empty():
    with pytest.raises(ValueError):
        data.empirical_label_dist(np.array([], dtype=np.int64), 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_label_dist_sums_to_one_and_counts_exactly(labels):
    arr = np.asarray(labels, dtype=np.int64)
    d = data.empirical_label_dist(arr, 5)
    assert d.sum() == pytest.approx(1.0, abs=1e-12)
    for c in range(5):
        assert d[c] == (arr == c).sum() / arr.size


# --- synthetic mixture ---------------------------------------------------

def test_mixture_spread_zero_collapses_to_means():
    ds = data.gen_synthetic_mixture(3, 4, 5, spread=0.0, seed=1)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_mixture_same_seed_bit_identical():
    a = data.gen_synthetic_mixture(4, 6, 10, 0.5, seed=9)
    b = data.gen_synthetic_mixture(4, 6, 10, 0.5, seed=9)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_mixture_shapes_and_label_blocks():
    ds = data.gen_synthetic_mixture(3, 5, 7, 1.0, seed=0)
    assert ds.n == 21 and ds.dim == 5
    np.testing.assert_array_equal(ds.labels, np.repeat(np.arange(3), 7))


def test_mixture_separated_classes_linear_probe():
    # Generous separation: a least-squares one-hot probe must nail it.
    ds = data.gen_synthetic_mixture(2, 8, 200, spread=0.05, seed=3)
    X = np.hstack([ds.features, np.ones((ds.n, 1))])
    Y = np.eye(2)[ds.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    acc = (np.argmax(X @ W, axis=1) == ds.labels).mean()
    assert acc > 0.99


def test_mixture_rejects_bad_args():
    with pytest.raises(ValueError):
        data.gen_synthetic_mixture(1, 4, 5, 1.0, 0)
    with pytest.raises(ValueError):
        data.gen_synthetic_mixture(3, 1, 5, 1.0, 0)
    with pytest.raises(ValueError):
        data.gen_synthetic_mixture(3, 4, 5, -0.1, 0)


def test_standardize_train_stats_and_zero_variance_guard():
    rng = np.random.default_rng(0)
    feats = rng.normal(5.0, 3.0, size=(50, 3))
    feats[:, 2] = 7.0  # constant dimension stays finite
    train = data.Dataset(feats, rng.integers(0, 2, 50).astype(np.int64), 2)
    (out,) = data.standardize(train)
    assert np.allclose(out.features[:, :2].mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(out.features[:, :2].std(axis=0), 1.0, atol=1e-12)
    assert np.isfinite(out.features).all()


def test_mixture_train_test_share_means():
    train, test = data.mixture_train_test(3, 4, 50, 20, spread=0.1, seed=2)
    assert train.n == 150 and test.n == 60
    # same class => nearby standardized means across the two splits
    for c in range(3):
        mu_tr = train.features[train.labels == c].mean(axis=0)
        mu_te = test.features[test.labels == c].mean(axis=0)
        assert np.linalg.norm(mu_tr - mu_te) < 0.5


# --- dirichlet_partition ------------------------------------------------

def _partition(n_per_class=20, C=5, K=4, delta=0.3, seed=0):
    ds = data.gen_synthetic_mixture(C, 3, n_per_class, 1.0, seed=seed)
    spec = data.PartitionSpec(num_clients=K, delta=delta, seed=seed)
    return ds, data.dirichlet_partition(ds, spec)


def test_partition_exact_disjoint_cover():
    ds, clients = _partition()
    assert sum(c.n for c in clients) == ds.n
    # reconstruct index sets by matching rows; features are unique w.h.p.
    seen = set()
    for c in clients:
        for row in c.features:
            key = row.tobytes()
            assert key not in seen
            seen.add(key)
    assert len(seen) == ds.n


def test_partition_balanced_quota():
    _, clients = _partition(n_per_class=24, C=4, K=8)
    assert all(c.n == 12 for c in clients)


def test_partition_indivisible_rejected():
    ds = data.gen_synthetic_mixture(3, 3, 7, 1.0, seed=0)
    with pytest.raises(ValueError, match="divisible"):
        data.dirichlet_partition(ds, data.PartitionSpec(num_clients=4))


def test_partition_unbalanced_mode_rejected():
    ds = data.gen_synthetic_mixture(3, 3, 8, 1.0, seed=0)
    spec = data.PartitionSpec(num_clients=2, balanced=False)
    with pytest.raises(ValueError, match="balanced"):
        data.dirichlet_partition(ds, spec)


def test_partition_single_client_gets_global_dist():
    ds, clients = _partition(K=1)
    np.testing.assert_allclose(
        clients[0].label_dist,
        data.empirical_label_dist(ds.labels, ds.num_classes),
        atol=1e-15,
    )


def test_partition_deterministic():
    _, a = _partition(seed=5)
    _, b = _partition(seed=5)
    for ca, cb in zip(a, b):
        assert np.array_equal(ca.features, cb.features)
        assert np.array_equal(ca.labels, cb.labels)


def test_partition_label_dist_matches_counts():
    _, clients = _partition(delta=0.1)
    for c in clients:
        want = np.bincount(c.labels, minlength=c.num_classes) / c.n
        np.testing.assert_array_equal(c.label_dist, want)
        assert c.label_dist.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.floats(0.05, 50.0), st.integers(0, 10_000))
def test_partition_invariants_random(K, delta, seed):
    ds = data.gen_synthetic_mixture(4, 3, 6 * K, 1.0, seed=seed % 97)
    clients = data.dirichlet_partition(
        ds, data.PartitionSpec(num_clients=K, delta=delta, seed=seed))
    assert len(clients) == K
    assert all(c.n == ds.n // K for c in clients)
    total = np.zeros(4, dtype=np.int64)
    for c in clients:
        total += np.bincount(c.labels, minlength=4)
    np.testing.assert_array_equal(total, np.bincount(ds.labels, minlength=4))


def _mean_tv(clients, global_dist):
    return float(np.mean([
        0.5 * np.abs(c.label_dist - global_dist).sum() for c in clients
    ]))


def test_partition_low_delta_is_skewed_high_delta_is_uniform():
    ds = data.gen_synthetic_mixture(5, 3, 200, 1.0, seed=0)
    gd = data.empirical_label_dist(ds.labels, 5)
    skew = data.dirichlet_partition(ds, data.PartitionSpec(10, delta=0.05, seed=1))
    flat = data.dirichlet_partition(ds, data.PartitionSpec(10, delta=1000.0, seed=1))
    assert _mean_tv(skew, gd) > _mean_tv(flat, gd)


# --- IDX ----------------------------------------------------------------

def _write_idx_images(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", data.IDX_IMAGE_MAGIC))
        for d in arr.shape:
            fh.write(struct.pack(">I", d))
        fh.write(arr.tobytes())


def _write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", data.IDX_LABEL_MAGIC))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())


def test_idx_four_sample_fixture(tmp_path):
    imgs = np.arange(4 * 2 * 3, dtype=np.uint8).reshape(4, 2, 3)
    img_path = tmp_path / "t-images-idx3-ubyte"
    lab_path = tmp_path / "t-labels-idx1-ubyte"
    _write_idx_images(img_path, imgs)
    _write_idx_labels(lab_path, [0, 1, 1, 2])
    ds = data.load_idx(str(img_path), str(lab_path))
    assert ds.n == 4 and ds.dim == 6 and ds.num_classes == 3
    np.testing.assert_allclose(ds.features, imgs.reshape(4, 6) / 255.0)
    np.testing.assert_array_equal(ds.labels, [0, 1, 1, 2])


def test_idx_companion_label_path_derived(tmp_path):
    img_path = tmp_path / "digits-images-idx3-ubyte"
    lab_path = tmp_path / "digits-labels-idx1-ubyte"
    _write_idx_images(img_path, np.zeros((2, 2, 2), dtype=np.uint8))
    _write_idx_labels(lab_path, [0, 1])
    ds = data.load_idx(str(img_path))
    assert ds.n == 2


def test_idx_empty_file_is_format_error(tmp_path):
    p = tmp_path / "empty-images-idx3-ubyte"
    p.write_bytes(b"")
    with pytest.raises(data.FormatError, match="byte offset 0"):
        data.load_idx(str(p), str(p))


def test_idx_bad_magic_is_format_error(tmp_path):
    p = tmp_path / "bad-images-idx3-ubyte"
    p.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
    with pytest.raises(data.FormatError, match="magic"):
        data.load_idx(str(p), str(p))


def test_idx_payload_length_mismatch_is_format_error(tmp_path):
    p = tmp_path / "short-images-idx3-ubyte"
    with open(p, "wb") as fh:
        fh.write(struct.pack(">IIII", data.IDX_IMAGE_MAGIC, 4, 2, 3))
        fh.write(b"\x00" * 10)  # 24 expected
    with pytest.raises(data.FormatError, match="does not match dimensions"):
        data.load_idx(str(p), str(p))


def test_idx_count_mismatch_between_files(tmp_path):
    img_path = tmp_path / "x-images-idx3-ubyte"
    lab_path = tmp_path / "x-labels-idx1-ubyte"
    _write_idx_images(img_path, np.zeros((3, 2, 2), dtype=np.uint8))
    _write_idx_labels(lab_path, [0, 1])
    with pytest.raises(data.FormatError, match="images but"):
        data.load_idx(str(img_path), str(lab_path))


# --- dataset validation ---------------------------------------------------

def test_dataset_rejects_label_out_of_range():
    with pytest.raises(ValueError, match="labels outside"):
        data.Dataset(np.zeros((2, 2)), np.array([0, 5]), 3)


def test_dataset_rejects_nan_features():
    with pytest.raises(ValueError, match="non-finite"):
        data.Dataset(np.full((2, 2), np.nan), np.array([0, 1]), 2)


def test_client_dataset_rejects_empty_shard():
    with pytest.raises(ValueError, match="empty"):
        data.ClientDataset(0, np.zeros((0, 3)), np.array([], dtype=np.int64), 2)
