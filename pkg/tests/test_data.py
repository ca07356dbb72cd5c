import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedawa.data import (
    ClientPartition,
    DataError,
    Dataset,
    DirichletSpec,
    IdxParseError,
    LabelHistogram,
    PartitionError,
    dirichlet_partition,
    extreme_groups,
    gen_blobs,
    label_histogram,
    load_csv,
    load_idx,
    partition_manifest,
    read_idx,
)


def entropy(p):
    p = np.asarray(p)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# --- Dataset / histograms -------------------------------------------------------


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), np.array([0]), 1)


def test_histogram_examples():
    ds = Dataset(np.zeros((3, 1)), np.array([0, 0, 2]), 3)
    h = label_histogram(ds, ClientPartition(0, (0, 1, 2)))
    assert h.counts == (2, 0, 1)
    full = label_histogram(gen_blobs(4, 2, 7, 1.0, 0))
    assert full.total == 28
    assert abs(sum(full.normalized) - 1.0) < 1e-12


def test_histogram_of_nothing_is_an_error():
    with pytest.raises(DataError):
        LabelHistogram.from_counts([0, 0])


# --- blobs ----------------------------------------------------------------------


def test_gen_blobs_counts():
    ds = gen_blobs(2, 2, 5, 1.0, 0)
    assert len(ds) == 10
    assert np.bincount(ds.labels).tolist() == [5, 5]


def test_gen_blobs_zero_spread_collapses_classes():
    ds = gen_blobs(3, 4, 6, 0.0, 1)
    for c in range(3):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_gen_blobs_determinism_and_streams():
    a, b = gen_blobs(3, 4, 6, 1.0, 9), gen_blobs(3, 4, 6, 1.0, 9)
    assert np.array_equal(a.features, b.features)
    test = gen_blobs(3, 4, 6, 1.0, 9, sample_stream=1)
    assert not np.array_equal(a.features, test.features)
    # same class means on both streams
    big_a = gen_blobs(3, 4, 4000, 1.0, 9)
    big_t = gen_blobs(3, 4, 4000, 1.0, 9, sample_stream=1)
    for c in range(3):
        assert np.allclose(big_a.features[big_a.labels == c].mean(0), big_t.features[big_t.labels == c].mean(0), atol=0.1)


# --- Dirichlet partition -------------------------------------------------------------


def test_near_iid_partition_at_large_alpha():
    ds = gen_blobs(10, 2, 200, 1.0, 0)
    parts = dirichlet_partition(ds.labels, DirichletSpec(100.0, 4, 0))
    g = np.asarray(label_histogram(ds).normalized)
    for p in parts:
        assert np.abs(np.asarray(label_histogram(ds, p).normalized) - g).max() <= 0.15


def test_small_alpha_is_more_skewed():
    ds = gen_blobs(10, 2, 200, 1.0, 0)
    def mean_entropy(alpha):
        parts = dirichlet_partition(ds.labels, DirichletSpec(alpha, 4, 3))
        return np.mean([entropy(label_histogram(ds, p).normalized) for p in parts])
    assert mean_entropy(0.1) < mean_entropy(100.0)


def test_single_client_gets_everything():
    labels = np.repeat(np.arange(3), 4)
    (p,) = dirichlet_partition(labels, DirichletSpec(0.5, 1, 0))
    assert p.indices == tuple(range(12))


def test_partition_infeasible_min_samples():
    with pytest.raises(PartitionError):
        dirichlet_partition(np.zeros(10, int), DirichletSpec(0.5, 4, 0, min_samples=3))


def test_rebalance_rescues_tiny_alpha():
    labels = np.repeat(np.arange(2), 10)
    parts = dirichlet_partition(labels, DirichletSpec(0.001, 6, 0, min_samples=3, max_retries=1))
    assert min(p.n for p in parts) >= 3
    assert sorted(i for p in parts for i in p.indices) == list(range(20))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 50.0), st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_partition_is_disjoint_cover(k, alpha, seed, min_samples):
    labels = np.random.default_rng(seed).integers(0, 5, size=120)
    parts = dirichlet_partition(labels, DirichletSpec(alpha, k, seed, min_samples=min_samples))
    assert [p.client_id for p in parts] == list(range(k))
    flat = sorted(i for p in parts for i in p.indices)
    assert flat == list(range(120))
    assert all(p.n >= min_samples for p in parts)


def test_partition_determinism():
    labels = np.repeat(np.arange(5), 30)
    spec = DirichletSpec(0.3, 6, 42)
    assert dirichlet_partition(labels, spec) == dirichlet_partition(labels, spec)


# --- extreme groups ---------------------------------------------------------------


def test_extreme_groups_structure():
    ds = gen_blobs(10, 2, 200, 1.0, 0)
    parts = extreme_groups(ds.labels, 10, 12, seed=0)
    assert sorted(i for p in parts for i in p.indices) == list(range(len(ds)))
    hists = [np.asarray(label_histogram(ds, p).counts) for p in parts]
    for k in range(4):
        assert hists[k][5:].sum() == 0 and hists[k][:5].sum() > 0
    for k in range(4, 8):
        assert hists[k][:5].sum() == 0 and hists[k][5:].sum() > 0
    for k in range(8, 12):
        assert np.all(hists[k] > 0)
    sizes = [p.n for p in parts]
    assert max(sizes) - min(sizes) <= 2


def test_extreme_groups_needs_multiple_of_three():
    with pytest.raises(PartitionError):
        extreme_groups(np.zeros(30, int), 2, clients=10)


def test_partition_manifest_shape():
    ds = gen_blobs(3, 2, 10, 1.0, 0)
    parts = dirichlet_partition(ds.labels, DirichletSpec(0.5, 3, 1))
    man = partition_manifest(ds, parts, 1, 0.5)
    assert man["seed"] == 1 and man["alpha"] == 0.5
    assert sum(sum(c["histogram"]) for c in man["clients"]) == 30
    assert [c["n"] for c in man["clients"]] == [p.n for p in parts]


# --- IDX / CSV loaders ---------------------------------------------------------------


def write_idx(path, code, dims, payload: bytes):
    path.write_bytes(bytes([0, 0, code, len(dims)]) + struct.pack(f">{len(dims)}I", *dims) + payload)


@pytest.fixture
def idx_pair(tmp_path):
    pixels = bytes([0, 255, 128, 0] * 4)
    write_idx(tmp_path / "img", 0x08, (4, 2, 2), pixels)
    write_idx(tmp_path / "lab", 0x08, (4,), bytes([0, 1, 2, 1]))
    return tmp_path / "img", tmp_path / "lab"


def test_load_idx_fixture(idx_pair):
    ds = load_idx(*idx_pair)
    assert len(ds) == 4 and ds.dim == 4
    assert ds.features[0, 1] == 1.0
    assert ds.features[0, 0] == 0.0
    assert ds.labels.tolist() == [0, 1, 2, 1]
    assert ds.class_count == 3


def test_read_idx_big_endian_floats(tmp_path):
    write_idx(tmp_path / "f", 0x0D, (2,), struct.pack(">2f", 1.5, -2.0))
    assert read_idx(tmp_path / "f").tolist() == [1.5, -2.0]


@pytest.mark.parametrize(
    "blob,offset",
    [
        (b"\x00\x00", 2),
        (b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00", 0),
        (b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00", 2),
        (b"\x00\x00\x08\x02" + struct.pack(">I", 2), 8),
        (b"\x00\x00\x08\x01" + struct.pack(">I", 4) + b"\x00\x00", 10),
        (b"\x00\x00\x08\x01" + struct.pack(">I", 1) + b"\x00\x00", 9),
    ],
)
def test_read_idx_errors_name_offsets(tmp_path, blob, offset):
    (tmp_path / "bad").write_bytes(blob)
    with pytest.raises(IdxParseError) as info:
        read_idx(tmp_path / "bad")
    assert info.value.offset == offset


def test_load_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", 0x08, (2, 1), b"\x00\x01")
    write_idx(tmp_path / "lab", 0x08, (3,), b"\x00\x01\x00")
    with pytest.raises(DataError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_load_csv(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("label,f0,f1\n0,1.0,2.0\n2,3.5,-1\n")
    ds = load_csv(f)
    assert ds.labels.tolist() == [0, 2]
    assert ds.features.tolist() == [[1.0, 2.0], [3.5, -1.0]]
    assert ds.class_count == 3


@pytest.mark.parametrize("text", ["", "x,f0\n0,1\n", "label,f0\n0,1,2\n", "label,f0\n0,abc\n", "label,f0\n"])
def test_load_csv_errors(tmp_path, text):
    f = tmp_path / "d.csv"
    f.write_text(text)
    with pytest.raises(DataError):
        load_csv(f)
