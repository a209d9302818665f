"""
Datasets for distill-lab: the synthetic capacity-gap benchmark generator and
CSV ingestion/export.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, DomainError, ParseError, ShapeError
from .distill import one_hot

logger = logging.getLogger('distill-lab.datasets')

SPLITS = ('train', 'dev', 'test')
LABEL_COLUMN = 'label'
SPLIT_COLUMN = 'split'

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SplitData:
    """Features and labels of one split."""
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return int(self.labels.size)

    def one_hot(self) -> np.ndarray:
        return one_hot(self.labels, self.n_classes)


@dataclass(eq=False)
class Dataset:
    """Labelled samples with a train/dev/test tag per row."""
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.features.ndim != 2:
            raise ShapeError("dataset features must be 2-D", self.features.shape)
        if self.labels.shape != (self.features.shape[0],) or self.splits.shape != self.labels.shape:
            raise ShapeError("dataset columns have different lengths",
                             self.features.shape, self.labels.shape, self.splits.shape)
        if self.n_classes < 2:
            raise DomainError(f"a dataset needs at least 2 classes, got {self.n_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DomainError(f"labels must lie in [0, {self.n_classes})")
        unknown = set(self.splits.tolist()) - set(SPLITS)
        if unknown:
            raise DomainError(f"unknown split tags: {sorted(unknown)}")

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def split(self, tag: str) -> SplitData:
        if tag not in SPLITS:
            raise DomainError(f"unknown split {tag!r}; expected one of {SPLITS}")
        mask = self.splits == tag
        return SplitData(self.features[mask], self.labels[mask], self.n_classes)

    def split_sizes(self) -> Dict[str, int]:
        return {tag: int(np.sum(self.splits == tag)) for tag in SPLITS}


@dataclass(frozen=True)
class CapacityGapBenchmark:
    """Gaussian-mixture classification task.

    ``seeds`` are the canonical run seeds shipped with the benchmark; the
    data itself is drawn from ``gen_synthetic(spec, seed)``.
    """
    n_classes: int = 4
    input_dim: int = 16
    cluster_spread: float = 1.0
    label_noise_rate: float = 0.1
    train_size: int = 4000
    dev_size: int = 500
    test_size: int = 500
    clusters_per_class: int = 1
    centroid_scale: float = 1.0
    seeds: Tuple[int, ...] = tuple(range(1, 11))

    def __post_init__(self):
        object.__setattr__(self, 'seeds', tuple(int(s) for s in self.seeds))
        if self.n_classes < 2 or self.input_dim < 1 or self.clusters_per_class < 1:
            raise ConfigError("synthetic benchmark needs n_classes >= 2, input_dim >= 1, "
                              "clusters_per_class >= 1")
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ConfigError(f"label_noise_rate must lie in [0, 0.5), got {self.label_noise_rate}")
        if self.cluster_spread < 0:
            raise ConfigError(f"cluster_spread must be >= 0, got {self.cluster_spread}")
        if min(self.train_size, self.dev_size, self.test_size) < 1:
            raise ConfigError("every split needs at least one sample")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_classes': self.n_classes,
            'input_dim': self.input_dim,
            'cluster_spread': self.cluster_spread,
            'label_noise_rate': self.label_noise_rate,
            'train_size': self.train_size,
            'dev_size': self.dev_size,
            'test_size': self.test_size,
            'clusters_per_class': self.clusters_per_class,
            'centroid_scale': self.centroid_scale,
            'seeds': list(self.seeds),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CapacityGapBenchmark':
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic dataset keys: {sorted(unknown)}")
        kwargs = dict(data)
        if 'seeds' in kwargs:
            kwargs['seeds'] = tuple(kwargs['seeds'])
        return cls(**kwargs)


def gen_synthetic(spec: CapacityGapBenchmark, seed: int) -> Dataset:
    """Draw a Gaussian-mixture dataset; deterministic in ``seed``.

    Classes are exactly balanced within each split. A fraction
    ``label_noise_rate`` of the train labels is flipped to a different class
    chosen uniformly; dev and test stay clean.
    """
    rng = np.random.default_rng(seed)
    k, d, m = spec.n_classes, spec.input_dim, spec.clusters_per_class
    centroids = rng.normal(scale=spec.centroid_scale, size=(k, m, d))

    features, labels, splits = [], [], []
    for tag, size in zip(SPLITS, (spec.train_size, spec.dev_size, spec.test_size)):
        y = rng.permutation(np.arange(size) % k)
        cluster = rng.integers(0, m, size=size)
        x = centroids[y, cluster] + spec.cluster_spread * rng.normal(size=(size, d))
        if tag == 'train' and spec.label_noise_rate > 0:
            n_noisy = int(round(spec.label_noise_rate * size))
            noisy = rng.choice(size, size=n_noisy, replace=False)
            offsets = rng.integers(1, k, size=n_noisy)
            y = y.copy()
            y[noisy] = (y[noisy] + offsets) % k
        features.append(x)
        labels.append(y)
        splits.extend([tag] * size)
    dataset = Dataset(np.vstack(features), np.concatenate(labels), k, np.array(splits, dtype=object))
    logger.info("Generated synthetic dataset (seed %d): %s", seed, dataset.split_sizes())
    return dataset


def hash_split(line_number: int, raw_line: str) -> str:
    """Deterministic 80/10/10 split tag for a CSV row without a split column."""
    key = f"{line_number}:{raw_line}".encode('utf-8')
    bucket = int(hashlib.sha256(key).hexdigest()[:8], 16) % 10
    if bucket < 8:
        return 'train'
    return 'dev' if bucket == 8 else 'test'


def load_csv(path: PathLike) -> Dataset:
    """Read a dataset CSV: feature columns, then ``label``, then an optional ``split``."""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ParseError(f"cannot read dataset: {e}", path=str(path)) from e
    if not lines:
        raise ParseError("empty file, expected a header row", line=1, path=str(path))

    header = next(csv.reader([lines[0]]))
    header = [name.strip() for name in header]
    if LABEL_COLUMN not in header:
        raise ParseError(f"header must contain a {LABEL_COLUMN!r} column", line=1, path=str(path))
    label_index = header.index(LABEL_COLUMN)
    has_split = SPLIT_COLUMN in header
    if has_split and header.index(SPLIT_COLUMN) != label_index + 1:
        raise ParseError(f"{SPLIT_COLUMN!r} must directly follow {LABEL_COLUMN!r}",
                         line=1, path=str(path))
    if label_index < 1 or len(header) != label_index + 1 + int(has_split):
        raise ParseError("header must name feature columns, then 'label' (then optional 'split')",
                         line=1, path=str(path))

    rows: List[List[float]] = []
    labels: List[int] = []
    splits: List[str] = []
    for line_number, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        cells = [cell.strip() for cell in next(csv.reader([raw]))]
        if len(cells) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(cells)}",
                             line=line_number, path=str(path))
        try:
            rows.append([float(cell) for cell in cells[:label_index]])
        except ValueError as e:
            raise ParseError(f"non-numeric feature value ({e})", line=line_number, path=str(path)) from e
        try:
            label = int(cells[label_index])
        except ValueError as e:
            raise ParseError(f"label {cells[label_index]!r} is not an integer",
                             line=line_number, path=str(path)) from e
        if label < 0:
            raise ParseError(f"label {label} is negative", line=line_number, path=str(path))
        labels.append(label)
        if has_split:
            tag = cells[label_index + 1]
            if tag not in SPLITS:
                raise ParseError(f"unknown split tag {tag!r}", line=line_number, path=str(path))
            splits.append(tag)
        else:
            splits.append(hash_split(line_number, raw.strip()))

    if not rows:
        raise ParseError("no data rows", line=2, path=str(path))
    features = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(features)):
        raise ParseError("features must be finite", path=str(path))
    n_classes = max(2, max(labels) + 1)
    dataset = Dataset(features, np.array(labels), n_classes, np.array(splits, dtype=object))
    logger.info("Loaded %d samples from %s: %s", len(labels), path, dataset.split_sizes())
    return dataset


def save_csv(dataset: Dataset, path: PathLike) -> Path:
    """Write ``dataset`` in the format ``load_csv`` reads, split column included."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"x{j}" for j in range(dataset.input_dim)] + [LABEL_COLUMN, SPLIT_COLUMN]
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row, label, tag in zip(dataset.features, dataset.labels, dataset.splits):
            writer.writerow([repr(float(v)) for v in row] + [int(label), tag])
    return path


def load_dataset(source: Dict[str, Any], base_dir: Optional[Path] = None) -> Dataset:
    """Build a dataset from a config ``dataset`` section."""
    if 'synthetic' in source:
        synthetic = source['synthetic']
        spec = CapacityGapBenchmark.from_dict(
            {key: value for key, value in synthetic.items() if key != 'seed'})
        return gen_synthetic(spec, int(synthetic.get('seed', 0)))
    if 'csv' in source:
        csv_path = Path(source['csv'])
        if base_dir is not None and not csv_path.is_absolute():
            csv_path = base_dir / csv_path
        return load_csv(csv_path)
    raise ConfigError("dataset section needs a 'synthetic' or 'csv' entry")
