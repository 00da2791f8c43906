import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldpfed.data_io import (
    Dataset,
    MetricsRow,
    load_idx,
    metrics_csv,
    partition,
    partition_indices,
    read_metrics_jsonl,
    synth_dataset,
    train_test_split,
    write_idx,
    write_metrics,
)
from ldpfed.errors import ConfigError, DataError, FormatError


def grid_dataset(n, side, classes, seed):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, side * side))
    return Dataset(pixels / 255.0, rng.integers(0, classes, n), classes)


def test_idx_round_trip(tmp_path):
    data = grid_dataset(37, 5, 10, 0)
    write_idx(data, tmp_path / "img", tmp_path / "lab", shape=(5, 5))
    back = load_idx(tmp_path / "img", tmp_path / "lab", class_count=10)
    assert np.array_equal(back.features, data.features)
    assert np.array_equal(back.labels, data.labels)
    assert back.class_count == 10


def test_idx_header_layout(tmp_path):
    data = grid_dataset(3, 2, 4, 1)
    write_idx(data, tmp_path / "img", tmp_path / "lab", shape=(2, 2))
    raw = (tmp_path / "img").read_bytes()
    assert struct.unpack(">IIII", raw[:16]) == (0x00000803, 3, 2, 2)
    assert len(raw) == 16 + 12
    assert struct.unpack(">II", (tmp_path / "lab").read_bytes()[:8]) == (0x00000801, 3)


def test_idx_gzip(tmp_path):
    data = grid_dataset(5, 3, 10, 2)
    write_idx(data, tmp_path / "img", tmp_path / "lab", shape=(3, 3))
    for name in ("img", "lab"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    back = load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")
    assert np.array_equal(back.features, data.features)


def test_idx_bad_magic(tmp_path):
    data = grid_dataset(2, 2, 2, 3)
    write_idx(data, tmp_path / "img", tmp_path / "lab", shape=(2, 2))
    with pytest.raises(FormatError, match="magic"):
        load_idx(tmp_path / "lab", tmp_path / "img")


def test_idx_truncated_reports_offset(tmp_path):
    data = grid_dataset(4, 4, 3, 4)
    write_idx(data, tmp_path / "img", tmp_path / "lab", shape=(4, 4))
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="byte offset") as err:
        load_idx(tmp_path / "img", tmp_path / "lab")
    assert err.value.offset == len(raw) - 5
    (tmp_path / "img").write_bytes(raw[:10])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_idx_count_mismatch(tmp_path):
    write_idx(grid_dataset(4, 2, 3, 5), tmp_path / "img", tmp_path / "lab", shape=(2, 2))
    write_idx(grid_dataset(3, 2, 3, 5), tmp_path / "img3", tmp_path / "lab3", shape=(2, 2))
    with pytest.raises(FormatError, match="does not match"):
        load_idx(tmp_path / "img", tmp_path / "lab3")


def test_idx_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_synth_balanced_and_deterministic():
    a = synth_dataset(10, 100, 8, 3.0, seed=1)
    b = synth_dataset(10, 100, 8, 3.0, seed=1)
    assert len(a) == 1000
    assert np.bincount(a.labels).tolist() == [100] * 10
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert a.features.min() >= 0 and a.features.max() <= 1


def test_synth_zero_separation_has_identical_class_means():
    data = synth_dataset(4, 2000, 6, 0.0, seed=2)
    means = np.stack([data.features[data.labels == c].mean(axis=0) for c in range(4)])
    assert np.abs(means - means.mean(axis=0)).max() < 0.01


def test_partition_sixty_thousand_into_fifty():
    data = Dataset(np.zeros((60_000, 1)), np.zeros(60_000, dtype=int), 10)
    shards = partition_indices(len(data), 50, seed=0)
    assert [s.size for s in shards] == [1200] * 50


def test_partition_single_shard_is_permutation():
    data = synth_dataset(3, 10, 2, 1.0, seed=0)
    (shard,) = partition(data, 1, seed=4)
    assert len(shard) == len(data)
    assert sorted(map(tuple, shard.features.tolist())) == sorted(map(tuple, data.features.tolist()))


@given(st.integers(1, 400), st.integers(1, 40), st.integers(0, 2**32))
def test_partition_is_bijection(n, shards, seed):
    if shards > n:
        with pytest.raises(ConfigError):
            partition_indices(n, shards, seed)
        return
    parts = partition_indices(n, shards, seed)
    sizes = [p.size for p in parts]
    assert max(sizes) - min(sizes) <= 1
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(n))


def test_train_test_split_disjoint():
    data = synth_dataset(5, 40, 3, 2.0, seed=0)
    train, test = train_test_split(data, 0.25, seed=1)
    assert len(train) == 150 and len(test) == 50
    rows = {tuple(r) for r in train.features.tolist()}
    assert not rows & {tuple(r) for r in test.features.tolist()}


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 3)
    with pytest.raises(DataError):
        Dataset(np.full((1, 2), 1.5), np.array([0]), 3)


def test_metrics_files(tmp_path):
    rows = [MetricsRow(0, "arm", 0.5, 1.25, 0.1, 0.0), MetricsRow(1, "arm", 0.75, 0.5, 0.2, 0.0)]
    jsonl, csv_path = write_metrics(rows, tmp_path, "m")
    assert read_metrics_jsonl(jsonl) == rows
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "round,arm,test_accuracy,test_loss,alpha_spent,wall_ms"
    assert lines[1] == "0,arm,0.5,1.25,0.1,0.0"
    assert metrics_csv(rows) == csv_path.read_text()
