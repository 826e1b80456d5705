import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedchain.dataset import (
    CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, DatasetError, DataShard, gen_synthetic, load_cifar10,
    partition, read_cifar_file, write_cifar_file,
)


def perceptron_accuracy(shard, epochs=1000):
    """Multiclass perceptron with bias; an independent separability oracle."""
    x = np.hstack([shard.features, np.ones((len(shard), 1))])
    W = np.zeros((shard.class_count, x.shape[1]))
    for _ in range(epochs):
        mistakes = 0
        for xi, yi in zip(x, shard.labels):
            pred = int(np.argmax(W @ xi))
            if pred != yi:
                W[yi] += xi
                W[pred] -= xi
                mistakes += 1
        if mistakes == 0:
            break
    return float(np.mean(np.argmax(x @ W.T, axis=1) == shard.labels))


# ------------------------------------------------------------ CIFAR-10

def test_single_record_file(tmp_path):
    rec = bytes([7]) + bytes(range(256)) * 12
    p = tmp_path / "one.bin"
    p.write_bytes(rec)
    pixels, labels = read_cifar_file(p)
    assert labels.tolist() == [7]
    assert pixels.shape == (1, 3072)
    assert pixels[0].tobytes() == rec[1:]


def test_truncated_file(tmp_path):
    p = tmp_path / "short.bin"
    p.write_bytes(bytes(3072))
    with pytest.raises(DatasetError, match="truncated"):
        read_cifar_file(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cifar10(tmp_path)


def test_round_trip_and_scaling(tmp_path):
    gen = np.random.default_rng(0)
    sizes = [3, 2, 4, 1, 2]
    written = []
    for name, n in zip(CIFAR_TRAIN_FILES, sizes):
        px = gen.integers(0, 256, size=(n, 3072), dtype=np.uint8)
        lb = gen.integers(0, 10, size=n, dtype=np.uint8)
        write_cifar_file(tmp_path / name, px, lb)
        written.append((px, lb))
    tpx = gen.integers(0, 256, size=(5, 3072), dtype=np.uint8)
    tlb = np.arange(5, dtype=np.uint8)
    write_cifar_file(tmp_path / CIFAR_TEST_FILE, tpx, tlb)

    train, test = load_cifar10(tmp_path)
    assert len(train) == sum(sizes) and len(test) == 5
    assert train.class_count == test.class_count == 10
    all_px = np.concatenate([p for p, _ in written])
    np.testing.assert_array_equal(np.rint(train.features * 255).astype(np.uint8), all_px)
    np.testing.assert_array_equal(train.labels, np.concatenate([lb for _, lb in written]))
    assert train.features.min() >= 0 and train.features.max() <= 1
    assert (tmp_path / CIFAR_TEST_FILE).stat().st_size == 5 * 3073


def test_red_plane_comes_first(tmp_path):
    px = np.zeros((1, 3072), dtype=np.uint8)
    px[0, :1024] = 255
    write_cifar_file(tmp_path / "x.bin", px, [3])
    got, lb = read_cifar_file(tmp_path / "x.bin")
    assert lb[0] == 3 and got[0, :1024].min() == 255 and got[0, 1024:].max() == 0


# ----------------------------------------------------------- synthetic

def test_synthetic_is_linearly_separable():
    train, test = gen_synthetic(100, 2, 2, 10.0, seed=1)
    assert len(train) == 80 and len(test) == 20
    assert perceptron_accuracy(train) == 1.0


def test_synthetic_multiclass_separable():
    train, _ = gen_synthetic(300, 5, 6, 2.0, seed=4)
    assert perceptron_accuracy(train) == 1.0


def test_synthetic_deterministic():
    a = gen_synthetic(64, 3, 5, 1.5, seed=9)
    b = gen_synthetic(64, 3, 5, 1.5, seed=9)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_one_example_per_class_when_n_equals_c():
    train, test = gen_synthetic(4, 4, 3, 1.0, seed=0)
    labels = sorted(np.concatenate([train.labels, test.labels]).tolist())
    assert labels == [0, 1, 2, 3]


def test_synthetic_features_in_unit_interval():
    train, test = gen_synthetic(200, 3, 4, 5.0, seed=2)
    for s in (train, test):
        assert s.features.min() >= 0 and s.features.max() <= 1


def test_synthetic_rejects_bad_dim():
    with pytest.raises(DatasetError):
        gen_synthetic(10, 2, 0, 1.0, seed=0)


def test_shard_label_bounds():
    with pytest.raises(DatasetError):
        DataShard(np.zeros((2, 2)), np.array([0, 3]), 3)


# ----------------------------------------------------------- partition

def _rows(n):
    return DataShard(np.zeros((n, 1)), np.zeros(n, dtype=int), 1)


def test_even_split():
    assert partition(_rows(9), 3, seed=0).sizes == (3, 3, 3)


def test_remainder_split():
    assert sorted(partition(_rows(10), 3, seed=0).sizes) == [3, 3, 4]


def test_too_many_peers():
    with pytest.raises(DatasetError):
        partition(_rows(2), 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.data())
def test_partition_disjoint_and_covering(rows, data):
    n = data.draw(st.integers(1, rows))
    plan = partition(_rows(rows), n, seed=data.draw(st.integers(0, 2**32)))
    flat = np.concatenate(plan.assignment)
    assert len(flat) == rows
    assert set(flat.tolist()) == set(range(rows))
    assert max(plan.sizes) - min(plan.sizes) <= 1
