"""
Dataset loading, splitting, standardization and batch iteration.

Supports the MNIST IDX format (optionally gzip-compressed), CSV tables with a
declared schema, and seeded synthetic generators.
"""

from __future__ import annotations

import csv
import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from .const import (
    DEFAULT_CHUNK_SIZE,
    DEFAULT_TRAIN_FRACTION,
    ENV_DATA_DIR,
    MNIST_FILES,
    MNIST_IMAGE_MAGIC,
    MNIST_LABEL_MAGIC,
)
from .errors import FormatError, NumericalError, StructuralError

_LOGGER = logging.getLogger(__name__)

_IDX_HEADER = struct.Struct(">I")


class NormalizationRecord(BaseModel):
    """How features were rescaled; applied at most once per dataset."""

    kind: str
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None
    scale: Optional[float] = None


class CsvSchema(BaseModel):
    """Column layout of a tabular CSV file."""

    label_column: str
    drop_columns: List[str] = []
    label_map: Optional[Dict[str, int]] = None


CANCER_SCHEMA = CsvSchema(
    label_column="diagnosis", drop_columns=["id"], label_map={"M": 1, "B": 0}
)


@dataclass
class Dataset:
    """
    Features and targets of one split.

    Attributes:
        features: (N, D) float array.
        labels: (N,) integer classes or (N, C) regression targets.
        split: Name of the split, e.g. "train" or "test".
        normalization: Record of the rescaling applied, None if raw.
        noise_features: Indices of columns known to carry no signal.
        name: Source of the data.
    """

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    normalization: Optional[NormalizationRecord] = None
    noise_features: List[int] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2:
            raise StructuralError(f"Features must be (N, D), got {self.features.shape}")
        if self.labels.shape[0] != self.features.shape[0]:
            raise StructuralError(
                f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples"
            )
        if not np.all(np.isfinite(self.features)):
            raise NumericalError(f"Dataset {self.name or self.split} contains NaN/Inf")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.labels.ndim == 1 and np.issubdtype(self.labels.dtype, np.integer)

    @property
    def num_classes(self) -> int:
        if not self.is_classification:
            return self.labels.shape[1] if self.labels.ndim == 2 else 1
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return replace(
            self,
            features=self.features[idx],
            labels=self.labels[idx],
            split=split or self.split,
        )

    def as_tuple(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.features, self.labels


# IDX


def _open_binary(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, magic: int, rank: int) -> np.ndarray:
    with _open_binary(path) as handle:
        raw = handle.read()
    if len(raw) < 4:
        raise FormatError(f"{path.name}: file too short for an IDX header", offset=len(raw))
    (found,) = _IDX_HEADER.unpack_from(raw, 0)
    if found != magic:
        raise FormatError(
            f"{path.name}: bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", offset=0
        )
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"{path.name}: truncated IDX dimensions", offset=len(raw))
    dims = [_IDX_HEADER.unpack_from(raw, 4 + 4 * i)[0] for i in range(rank)]
    expected = int(np.prod(dims))
    available = len(raw) - header_end
    if available < expected:
        raise FormatError(
            f"{path.name}: expected {expected} data bytes, found {available}",
            offset=len(raw),
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end)
    return data.reshape(dims)


def load_mnist_idx(
    images_path: Path | str,
    labels_path: Path | str,
    limit: Optional[int] = None,
    split: str = "train",
) -> Dataset:
    """
    Read an MNIST image/label file pair.

    Args:
        images_path: IDX3 image file, optionally ``.gz``.
        labels_path: IDX1 label file, optionally ``.gz``.
        limit: Keep only the first ``limit`` samples.
        split: Split name recorded on the dataset.

    Returns:
        Dataset with 784 features scaled to [0, 1].

    Raises:
        FormatError: Bad magic, truncated data or mismatched counts.
    """
    images = _read_idx(Path(images_path), MNIST_IMAGE_MAGIC, 3)
    labels = _read_idx(Path(labels_path), MNIST_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4
        )
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    _LOGGER.info("Loaded %d MNIST %s samples", features.shape[0], split)
    return Dataset(
        features=features,
        labels=labels.astype(np.int64),
        split=split,
        normalization=NormalizationRecord(kind="pixel", scale=1.0 / 255.0),
        name="mnist",
    )


def mnist_paths(split: str, data_dir: Optional[Path | str] = None) -> Tuple[Path, Path]:
    """Locate the IDX files of a split, preferring uncompressed copies."""
    base = Path(data_dir or os.environ.get(ENV_DATA_DIR, "."))
    if split not in MNIST_FILES:
        raise StructuralError(f"Unknown MNIST split {split!r}")
    found = []
    for stem in MNIST_FILES[split]:
        plain = base / stem
        found.append(plain if plain.exists() else base / f"{stem}.gz")
    return found[0], found[1]


def mnist_available(data_dir: Optional[Path | str] = None) -> bool:
    try:
        return all(
            p.exists() for split in MNIST_FILES for p in mnist_paths(split, data_dir)
        )
    except StructuralError:
        return False


# CSV


def load_csv(path: Path | str, schema: CsvSchema = CANCER_SCHEMA) -> Dataset:
    """
    Read a tabular CSV file with a header row.

    Columns with an empty header name (a trailing delimiter) are ignored.

    Raises:
        FormatError: Missing label column, wrong row arity, unknown label or
            non-numeric feature, reported with the line number.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration as err:
            raise FormatError(f"{path.name}: empty file", line=1) from err
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise FormatError(
                f"{path.name}: label column {schema.label_column!r} missing", line=1
            )
        label_idx = header.index(schema.label_column)
        keep = [
            i
            for i, name in enumerate(header)
            if name and i != label_idx and name not in schema.drop_columns
        ]
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path.name}: expected {len(header)} fields, got {len(row)}",
                    line=line,
                )
            raw_label = row[label_idx].strip()
            if schema.label_map is not None:
                if raw_label not in schema.label_map:
                    raise FormatError(f"{path.name}: unknown label {raw_label!r}", line=line)
                labels.append(schema.label_map[raw_label])
            else:
                try:
                    labels.append(int(raw_label))
                except ValueError as err:
                    raise FormatError(
                        f"{path.name}: label {raw_label!r} is not an integer", line=line
                    ) from err
            try:
                rows.append([float(row[i]) for i in keep])
            except ValueError as err:
                raise FormatError(f"{path.name}: non-numeric feature", line=line) from err
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(keep))
    _LOGGER.info("Loaded %d rows with %d features from %s", len(rows), len(keep), path.name)
    return Dataset(
        features=features,
        labels=np.array(labels, dtype=np.int64),
        split="all",
        name=path.stem,
    )


# Splits and normalization


def split(
    ds: Dataset,
    rng: np.random.Generator,
    train_fraction: float = DEFAULT_TRAIN_FRACTION,
) -> Tuple[Dataset, Dataset]:
    """Seeded disjoint train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise StructuralError(f"Train fraction must be in (0, 1), got {train_fraction}")
    order = rng.permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(np.sort(order[:cut]), "train"), ds.subset(np.sort(order[cut:]), "test")


def standardize(train: Dataset, *others: Dataset) -> Tuple[Dataset, ...]:
    """Zero-mean unit-variance features using statistics of ``train`` only."""
    for ds in (train, *others):
        if ds.normalization is not None:
            raise StructuralError(
                f"Dataset {ds.name or ds.split} is already normalized ({ds.normalization.kind})"
            )
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std > 0.0, std, 1.0)
    record = NormalizationRecord(kind="standard", mean=mean.tolist(), std=std.tolist())
    return tuple(
        replace(ds, features=(ds.features - mean) / std, normalization=record)
        for ds in (train, *others)
    )


# Synthetic data


def synth_blobs(
    rng: np.random.Generator,
    n: int,
    d: int,
    classes: int,
    noise: float = 1.0,
    separation: float = 5.0,
) -> Dataset:
    """Gaussian class blobs around randomly placed centers."""
    if min(n, d, classes) < 1:
        raise StructuralError("n, d and classes must all be at least 1")
    centers = rng.normal(scale=separation, size=(classes, d))
    labels = rng.permutation(np.arange(n) % classes)
    features = centers[labels] + noise * rng.standard_normal((n, d))
    return Dataset(features=features, labels=labels.astype(np.int64), name="blobs")


def synth_noise_features(
    rng: np.random.Generator,
    n: int,
    d_signal: int,
    d_noise: int,
    classes: int = 2,
    noise: float = 1.0,
    separation: float = 3.0,
) -> Dataset:
    """Blobs in the first ``d_signal`` columns followed by pure-noise columns."""
    signal = synth_blobs(rng, n, d_signal, classes, noise, separation)
    extra = rng.standard_normal((n, d_noise))
    return Dataset(
        features=np.hstack([signal.features, extra]),
        labels=signal.labels,
        noise_features=list(range(d_signal, d_signal + d_noise)),
        name="noise_features",
    )


def synth_linear(
    rng: np.random.Generator,
    n: int,
    d: int,
    noise: float = 0.1,
    weights: Optional[np.ndarray] = None,
) -> Tuple[Dataset, np.ndarray]:
    """Linear-Gaussian regression data y = X w + ε; returns the true w too."""
    w = rng.standard_normal(d) if weights is None else np.asarray(weights, dtype=np.float64)
    x = rng.standard_normal((n, d))
    y = x @ w + noise * rng.standard_normal(n)
    return Dataset(features=x, labels=y[:, None], name="linear"), w


# Iteration


def batches(
    ds: Dataset,
    size: int,
    rng: Optional[np.random.Generator] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of mini-batches; the last partial batch is kept."""
    if size < 1:
        raise StructuralError(f"Batch size must be at least 1, got {size}")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise StructuralError("Shuffled batches need a generator")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, size):
        idx = order[start : start + size]
        yield ds.features[idx], ds.labels[idx]


def iter_batches(
    data, size: int = DEFAULT_CHUNK_SIZE
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Normalize a Dataset, an (x, y) pair or an iterable of pairs into batches."""
    if isinstance(data, Dataset):
        yield from batches(data, size, shuffle=False)
        return
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        x, y = data
        x = np.asarray(x, dtype=np.float64)
        for start in range(0, x.shape[0], size):
            yield x[start : start + size], y[start : start + size]
        return
    for x, y in data:
        yield np.asarray(x, dtype=np.float64), y
