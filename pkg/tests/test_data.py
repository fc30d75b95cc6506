import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpeft import tensor as T
from fedpeft.data import (Dataset, SyntheticTaskSpec, augment, augment_batch, dirichlet_partition,
                          heterogeneity, label_entropy, largest_remainder, load_csv, load_idx,
                          make_synthetic, read_idx, write_idx)
from fedpeft.errors import ConfigError, DataError, ParseError
from fedpeft.tensor import SgdConfig, Tensor

LABELS_10x800 = np.repeat(np.arange(10), 800)


# --- Dirichlet partitioning -------------------------------------------------

def test_single_client_gets_everything():
    for alpha in (0.01, 1.0, 100.0):
        part = dirichlet_partition(LABELS_10x800, 1, alpha, seed=3)
        assert np.all(part.owner == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.floats(0.05, 50), st.integers(0, 10_000),
       st.lists(st.integers(0, 6), min_size=1, max_size=300))
def test_partition_conserves_samples(n, alpha, seed, labels):
    labels = np.array(labels)
    part = dirichlet_partition(labels, n, alpha, seed)
    assert part.shard_sizes().sum() == len(labels)
    shards = part.shards()
    joined = np.concatenate(shards)
    assert np.array_equal(np.sort(joined), np.arange(len(labels)))
    counts = part.class_counts(labels, 7)
    np.testing.assert_array_equal(counts.sum(axis=0), np.bincount(labels, minlength=7))


def test_partition_is_deterministic():
    a = dirichlet_partition(LABELS_10x800, 8, 0.3, seed=9)
    b = dirichlet_partition(LABELS_10x800, 8, 0.3, seed=9)
    c = dirichlet_partition(LABELS_10x800, 8, 0.3, seed=10)
    assert np.array_equal(a.owner, b.owner)
    assert not np.array_equal(a.owner, c.owner)


@pytest.mark.parametrize("n,alpha", [(0, 1.0), (4, 0.0), (4, -1.0)])
def test_partition_input_errors(n, alpha):
    with pytest.raises(ValueError):
        dirichlet_partition([0, 1], n, alpha)


def test_largest_remainder_exact():
    counts = largest_remainder(np.array([0.5, 0.3, 0.2]), 7)  # 3.5, 2.1, 1.4
    assert counts.tolist() == [4, 2, 1]
    assert largest_remainder(np.array([1 / 3] * 3), 10).sum() == 10


def test_large_alpha_is_near_uniform():
    # Dirichlet(1000) coordinates have std ~0.0037 around 1/8; 20% relative is ~6.7 std
    for seed in range(100):
        counts = dirichlet_partition(LABELS_10x800, 8, 1000.0, seed).class_counts(LABELS_10x800)
        share = counts / 800
        assert np.all(np.abs(share - 1 / 8) <= 0.2 / 8), seed


def test_small_alpha_lowers_label_entropy():
    def mean_entropy(alpha):
        return np.mean([label_entropy(dirichlet_partition(LABELS_10x800, 8, alpha, s)
                                      .class_counts(LABELS_10x800)).mean() for s in range(100)])

    assert mean_entropy(0.1) < mean_entropy(1000.0)


def test_heterogeneity_decreases_with_alpha():
    labels = np.repeat(np.arange(10), 200)
    means = []
    for alpha in (0.1, 0.5, 1.0, 10.0, 1000.0):
        means.append(np.mean([heterogeneity(dirichlet_partition(labels, 8, alpha, s)
                                            .class_counts(labels)) for s in range(50)]))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_label_entropy_and_heterogeneity_edge_cases():
    assert label_entropy(np.array([[0, 0], [5, 5]])).tolist() == pytest.approx([0.0, np.log(2)])
    assert heterogeneity(np.array([[5, 5], [5, 5]])) == 0.0
    assert heterogeneity(np.array([[10, 0], [0, 10]])) == pytest.approx(0.5)


# --- synthetic tasks --------------------------------------------------------

@pytest.mark.parametrize("family", ["mlp", "vit"])
def test_synthetic_deterministic_and_balanced(family):
    spec = SyntheticTaskSpec(family=family, class_count=4, samples_per_class=25, image_size=8)
    a, b = make_synthetic(spec, seed=1), make_synthetic(spec, seed=1)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.histogram().tolist() == [25] * 4


def test_synthetic_shapes():
    v = make_synthetic(SyntheticTaskSpec(class_count=3, samples_per_class=2, image_size=8, channels=3))
    m = make_synthetic(SyntheticTaskSpec(family="mlp", class_count=3, samples_per_class=2, feature_dim=5))
    assert v.features.shape == (6, 3, 8, 8)
    assert m.features.shape == (6, 5)


@pytest.mark.parametrize("family", ["mlp", "vit"])
def test_shift_moves_the_distribution_smoothly(family):
    def mean_image(shift):
        spec = SyntheticTaskSpec(family=family, class_count=3, samples_per_class=200, image_size=8,
                                 noise=0.0, shift=shift)
        d = make_synthetic(spec, seed=0)
        return np.stack([np.abs(d.features[d.labels == c]).mean(axis=0) for c in range(3)])

    base = mean_image(0.0)
    d_small = np.abs(mean_image(0.05) - base).mean()
    d_large = np.abs(mean_image(0.6) - base).mean()
    assert 0 < d_small < d_large


def test_shift_out_of_range():
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(shift=1.5)


def test_linear_probe_separates_unit_blobs():
    spec = SyntheticTaskSpec(family="mlp", class_count=2, samples_per_class=300, feature_dim=16,
                             separation=1.0)
    train, test = make_synthetic(spec, seed=0), make_synthetic(spec, seed=1)
    w = Tensor(np.zeros((16, 2)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
    cfg = SgdConfig(0.5)
    x = train.features.astype(np.float64)
    for _ in range(200):
        T.backward(T.cross_entropy_loss(Tensor(x) @ w + b, train.labels))
        T.sgd_step([w, b], cfg)
    acc = ((test.features @ w.data + b.data).argmax(axis=1) == test.labels).mean()
    assert acc > 0.9


def test_dataset_validation_and_immutability():
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1, 5], 3)
    with pytest.raises(DataError):
        Dataset(np.zeros((3, 2)), [0, 1], 3)
    d = Dataset(np.zeros((2, 2)), [0, 1], 2)
    with pytest.raises(ValueError):
        d.features[0, 0] = 1.0


def test_cap_limits_total_samples():
    d = make_synthetic(SyntheticTaskSpec(family="mlp", class_count=5, samples_per_class=400), seed=0)
    capped = d.cap(1000, seed=1)
    assert len(capped) == 1000
    assert d.cap(5000) is d


# --- augmentation -----------------------------------------------------------

def test_flip_probability_zero_and_one():
    x = np.arange(12.0).reshape(1, 3, 4)
    rng = np.random.default_rng(0)
    assert augment(x, rng, horizontal_flip=0.0) is x
    once = augment(x, rng, horizontal_flip=1.0)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment(once, rng, horizontal_flip=1.0), x)


def test_flip_rate_matches_probability():
    rng = np.random.default_rng(123)
    x = np.arange(4.0).reshape(1, 1, 4)
    flips = sum(augment(x, rng, horizontal_flip=0.5)[0, 0, 0] == 3.0 for _ in range(10_000))
    # binomial std is 0.005; the tolerance is 4 std
    assert abs(flips / 10_000 - 0.5) <= 0.02


def test_augment_batch_flips_selected_rows():
    rng = np.random.default_rng(0)
    batch = np.arange(2 * 3 * 4.0).reshape(2, 1, 3, 4)
    out = augment_batch(batch, rng, horizontal_flip=1.0)
    assert np.array_equal(out, batch[..., ::-1])
    assert augment_batch(batch, rng, horizontal_flip=0.0) is batch


# --- file formats -----------------------------------------------------------

def _idx_fixture(tmp_path):
    images = bytes([0, 0, 8, 3]) + struct.pack(">III", 4, 2, 3) + bytes(range(24))
    labels = bytes([0, 0, 8, 1]) + struct.pack(">I", 4) + bytes([3, 0, 1, 3])
    (tmp_path / "img.idx").write_bytes(images)
    (tmp_path / "lbl.idx").write_bytes(labels)
    return tmp_path / "img.idx", tmp_path / "lbl.idx"


def test_load_idx_fixture(tmp_path):
    d = load_idx(*_idx_fixture(tmp_path))
    assert len(d) == 4 and d.class_count == 4
    assert d.features.shape == (4, 1, 2, 3)
    assert d.labels.tolist() == [3, 0, 1, 3]
    assert d.features[1, 0, 0, 0] == pytest.approx(6 / 255)


def test_write_then_read_idx(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (5, 4, 4))
    write_idx(tmp_path / "x.idx", arr)
    assert np.array_equal(read_idx(tmp_path / "x.idx"), arr)


def test_truncated_idx_reports_offset(tmp_path):
    img, lbl = _idx_fixture(tmp_path)
    img.write_bytes(img.read_bytes()[:30])
    with pytest.raises(ParseError, match="byte offset 30") as info:
        load_idx(img, lbl)
    assert info.value.offset == 30


def test_idx_magic_checked(tmp_path):
    img, lbl = _idx_fixture(tmp_path)
    with pytest.raises(ParseError, match="magic"):
        load_idx(lbl, img)
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01" + b"\0" * 8)
    with pytest.raises(ParseError, match="offset 0"):
        read_idx(tmp_path / "bad")


def test_csv_roundtrip(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0,f1,f2,f3\n1,0.5,1,2,3\n0,4,5,6,7\n")
    d = load_csv(path, class_count=2, shape=(1, 2, 2))
    assert d.features.shape == (2, 1, 2, 2) and d.labels.tolist() == [1, 0]


def test_csv_label_out_of_range_names_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0\n1,0.5\n0,1\n7,2\n")
    with pytest.raises(DataError, match="line 4"):
        load_csv(path, class_count=3)


@pytest.mark.parametrize("body,line", [("label,f0\n1,0.5,3\n", 2), ("label,f0\n1,x\n", 2),
                                        ("f0,label\n1,2\n", 1)])
def test_csv_malformed_rows(tmp_path, body, line):
    path = tmp_path / "d.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == line
