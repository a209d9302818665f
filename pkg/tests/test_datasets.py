import numpy as np
import pytest

from distill_lab.datasets import (CapacityGapBenchmark, Dataset, gen_synthetic, load_csv,
                                  load_dataset, save_csv)
from distill_lab.errors import ConfigError, DomainError, ParseError, ShapeError

from .conftest import FIXTURES, SMALL_BENCHMARK

# Hash splits of tests/fixtures/tiny.csv, file lines 2..11.
TINY_SPLITS = ['dev', 'train', 'test', 'train', 'train', 'test', 'train', 'dev', 'train', 'dev']


def test_gen_synthetic_is_deterministic():
    a = gen_synthetic(SMALL_BENCHMARK, 5)
    b = gen_synthetic(SMALL_BENCHMARK, 5)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert list(a.splits) == list(b.splits)
    assert not np.array_equal(a.features, gen_synthetic(SMALL_BENCHMARK, 6).features)


def test_gen_synthetic_split_sizes_and_balance():
    spec = CapacityGapBenchmark(n_classes=4, input_dim=3, train_size=400, dev_size=100,
                                test_size=100, label_noise_rate=0.0)
    data = gen_synthetic(spec, 0)
    assert data.split_sizes() == {'train': 400, 'dev': 100, 'test': 100}
    for tag in ('train', 'dev', 'test'):
        split = data.split(tag)
        shares = np.bincount(split.labels, minlength=4) / len(split)
        np.testing.assert_allclose(shares, 0.25, atol=0.02)


def test_zero_spread_collapses_each_class_to_its_centroid():
    spec = CapacityGapBenchmark(n_classes=3, input_dim=2, cluster_spread=0.0,
                                label_noise_rate=0.0, train_size=30, dev_size=6, test_size=6)
    data = gen_synthetic(spec, 3)
    points = {}
    for x, y in zip(data.features, data.labels):
        points.setdefault(int(y), set()).add(tuple(x))
    assert all(len(unique) == 1 for unique in points.values())
    assert len({next(iter(unique)) for unique in points.values()}) == 3


def test_label_noise_flips_exactly_the_requested_share():
    clean_spec = CapacityGapBenchmark(n_classes=4, input_dim=3, label_noise_rate=0.0,
                                      train_size=200, dev_size=20, test_size=20)
    noisy_spec = CapacityGapBenchmark(n_classes=4, input_dim=3, label_noise_rate=0.1,
                                      train_size=200, dev_size=20, test_size=20)
    clean = gen_synthetic(clean_spec, 9).split('train')
    noisy = gen_synthetic(noisy_spec, 9).split('train')
    np.testing.assert_array_equal(clean.features, noisy.features)
    assert int(np.sum(clean.labels != noisy.labels)) == 20


@pytest.mark.parametrize("kwargs", [
    {"n_classes": 1},
    {"label_noise_rate": 0.5},
    {"cluster_spread": -1.0},
    {"dev_size": 0},
])
def test_benchmark_validation(kwargs):
    with pytest.raises(ConfigError):
        CapacityGapBenchmark(**kwargs)


def test_benchmark_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        CapacityGapBenchmark.from_dict({"n_classes": 3, "colour": "blue"})
    assert CapacityGapBenchmark.from_dict(SMALL_BENCHMARK.to_dict()) == SMALL_BENCHMARK


def test_load_csv_with_split_column():
    data = load_csv(FIXTURES / "with_split.csv")
    assert data.input_dim == 3
    assert data.n_classes == 3
    assert list(data.splits) == ['train', 'dev', 'test']
    np.testing.assert_allclose(data.split('dev').features, [[1.1, 1.2, 1.3]])


def test_load_csv_hash_split_is_stable():
    data = load_csv(FIXTURES / "tiny.csv")
    assert list(data.splits) == TINY_SPLITS
    assert data.split_sizes() == {'train': 5, 'dev': 3, 'test': 2}
    np.testing.assert_array_equal(data.split('train').labels, [1, 0, 1, 0, 2])


@pytest.mark.parametrize("body, line", [
    ("x0,label\n1.0,0\nabc,1\n", 3),
    ("x0,x1,label\n1.0,2.0,0\n1.0,1\n", 3),
    ("x0,label,split\n1.0,0,train\n2.0,1,holdout\n", 3),
    ("x0,label\n1.0,-1\n", 2),
    ("x0,x1\n1.0,2.0\n", 1),
])
def test_load_csv_errors_name_the_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as excinfo:
        load_csv(path)
    assert excinfo.value.line == line
    assert f"bad.csv:{line}" in str(excinfo.value)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_csv(tmp_path / "absent.csv")


def test_save_then_load_keeps_everything(tmp_path, small_data):
    path = save_csv(small_data, tmp_path / "out" / "data.csv")
    loaded = load_csv(path)
    np.testing.assert_array_equal(loaded.features, small_data.features)
    np.testing.assert_array_equal(loaded.labels, small_data.labels)
    assert list(loaded.splits) == list(small_data.splits)


def test_dataset_validation():
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 2)), np.zeros(2), 2, np.array(['train'] * 3, dtype=object))
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), [0, 2], 2, np.array(['train'] * 2, dtype=object))
    with pytest.raises(DomainError):
        Dataset(np.zeros((1, 2)), [0], 2, np.array(['holdout'], dtype=object))


def test_load_dataset_sources(tmp_path):
    synthetic = load_dataset({"synthetic": dict(SMALL_BENCHMARK.to_dict(), seed=0)})
    np.testing.assert_array_equal(synthetic.features, gen_synthetic(SMALL_BENCHMARK, 0).features)
    relative = load_dataset({"csv": "tiny.csv"}, base_dir=FIXTURES)
    assert len(relative.labels) == 10
    with pytest.raises(ConfigError):
        load_dataset({})
