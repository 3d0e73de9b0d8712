"""Spurious-correlation datasets with a known (Y, Z) channel.

Each sample draws Y uniformly, then Z equal to the matched value Y mod B
with probability `corr` (otherwise uniform over the other bias values).
Inputs carry a Y pattern in the core dims, a Z pattern in the bias dims and
isotropic Gaussian noise everywhere.
"""

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError
from .infomeasure import ContingencyTable, label_noise_channel
from .ndcore import RngState, ensure_generator
from .utils import as_labels, format_float

logger = logging.getLogger(__name__)

_TRAIN_STREAM = 0
_TEST_STREAM = 1


@dataclass(frozen=True)
class DomainShift:
    corr: float
    signal_sep: float | None = None


@dataclass(frozen=True)
class SpuriousSpec:
    n: int = 20000
    n_targets: int = 2
    n_biases: int = 2
    corr: float = 0.9
    d_core: int = 2
    d_bias: int = 2
    d_noise: int = 4
    signal_sep: float = 2.0
    bias_sep: float = 3.0
    noise_sigma: float = 1.0
    n_test: int | None = None
    shift: DomainShift | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_targets < 1 or self.n_biases < 1:
            raise ValueError("n_targets and n_biases must be >= 1")
        _check_corr(self.corr, self.n_biases, "corr")
        if self.n < self.n_targets * self.n_biases:
            raise ValueError(
                f"n = {self.n} is smaller than the number of groups {self.n_targets * self.n_biases}"
            )
        if self.n_test is not None and self.n_test < self.n_targets * self.n_biases:
            raise ValueError(f"n_test = {self.n_test} is smaller than the number of groups")
        if min(self.d_core, self.d_bias, self.d_noise) < 0 or self.d_core + self.d_bias + self.d_noise < 1:
            raise ValueError("dimensions must be non-negative with at least one input column")
        _pattern_matrix(self.n_targets, self.d_core, self.signal_sep, "d_core")
        _pattern_matrix(self.n_biases, self.d_bias, self.bias_sep, "d_bias")
        if self.noise_sigma < 0.0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.shift is not None:
            _check_corr(self.shift.corr, self.n_biases, "shift corr")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def input_dim(self) -> int:
        return self.d_core + self.d_bias + self.d_noise

    @property
    def test_size(self) -> int:
        return self.n if self.n_test is None else self.n_test

    def joint_yz(self, corr: float | None = None) -> ContingencyTable:
        """Analytic p(Y, Z) of the generating channel."""
        return ContingencyTable.from_probs(
            _bias_channel(self.n_targets, self.n_biases, self.corr if corr is None else corr)
            / self.n_targets
        )


def _check_corr(corr: float, n_biases: int, name: str) -> None:
    lower = 1.0 / n_biases
    if not lower - 1e-12 <= corr <= 1.0:
        raise ValueError(f"{name} must lie in [1/B, 1] = [{lower:g}, 1], got {corr}")


def _bias_channel(n_targets: int, n_biases: int, corr: float) -> np.ndarray:
    """Row-stochastic p(Z = b | Y = a)."""
    if n_biases == 1:
        return np.ones((n_targets, 1))
    channel = np.full((n_targets, n_biases), (1.0 - corr) / (n_biases - 1))
    channel[np.arange(n_targets), np.arange(n_targets) % n_biases] = corr
    return channel


def _pattern_matrix(n_classes: int, dims: int, separation: float, name: str) -> np.ndarray:
    """Class means at pairwise distance `separation`."""
    if dims == 0:
        return np.zeros((n_classes, 0))
    if dims >= n_classes:
        patterns = np.zeros((n_classes, dims))
        patterns[:, :n_classes] = np.eye(n_classes) * separation / np.sqrt(2.0)
        return patterns - patterns.mean(axis=0, keepdims=True)
    if n_classes == 2:
        patterns = np.zeros((2, dims))
        patterns[:, 0] = [-separation / 2.0, separation / 2.0]
        return patterns
    raise ValueError(f"{name} = {dims} is too small to separate {n_classes} classes")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    z: np.ndarray
    n_targets: int
    n_biases: int

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(np.asarray(self.X, dtype=np.float64))
        if X.ndim != 2:
            raise ValueError(f"X must be a matrix, got {X.ndim}-d")
        y = as_labels(self.y, "y")
        z = as_labels(self.z, "z")
        if not X.shape[0] == y.shape[0] == z.shape[0]:
            raise ValueError(f"X, y and z must be row-aligned, got {X.shape[0]}, {y.shape[0]}, {z.shape[0]}")
        if y.size and y.max() >= self.n_targets:
            raise ValueError(f"y label {int(y.max())} out of range for {self.n_targets} targets")
        if z.size and z.max() >= self.n_biases:
            raise ValueError(f"z label {int(z.max())} out of range for {self.n_biases} biases")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    @property
    def groups(self) -> np.ndarray:
        return self.y * self.n_biases + self.z

    def group_counts(self) -> np.ndarray:
        counts = np.bincount(self.groups, minlength=self.n_targets * self.n_biases)
        return counts.reshape(self.n_targets, self.n_biases)

    def subset(self, index: np.ndarray) -> "LabeledDataset":
        return replace(self, X=self.X[index], y=self.y[index], z=self.z[index])

    def yz_table(self) -> ContingencyTable:
        return ContingencyTable.from_samples(
            self.y, self.z, cardinalities=(self.n_targets, self.n_biases)
        )


def _sample_split(
    spec: SpuriousSpec,
    n: int,
    corr: float,
    signal_sep: float,
    rng: np.random.Generator,
) -> LabeledDataset:
    y = rng.integers(0, spec.n_targets, size=n)
    channel = _bias_channel(spec.n_targets, spec.n_biases, corr)
    cumulative = np.cumsum(channel, axis=1)[y]
    draws = rng.random(n)[:, None]
    z = np.minimum((draws >= cumulative).sum(axis=1), spec.n_biases - 1)
    core = _pattern_matrix(spec.n_targets, spec.d_core, signal_sep, "d_core")[y]
    bias = _pattern_matrix(spec.n_biases, spec.d_bias, spec.bias_sep, "d_bias")[z]
    signal = np.concatenate([core, bias, np.zeros((n, spec.d_noise))], axis=1)
    X = signal + spec.noise_sigma * rng.standard_normal((n, spec.input_dim))
    dataset = LabeledDataset(X, y, z, spec.n_targets, spec.n_biases)
    empty = np.argwhere(dataset.group_counts() == 0)
    if corr < 1.0 and empty.size:
        groups = ", ".join(f"(y={a}, z={b})" for a, b in empty)
        raise ConfigError(f"empty group(s) {groups} after sampling {n} rows; increase n")
    return dataset


def generate(spec: SpuriousSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Biased train split and a group-balanced (or shifted) test split, determined by the seed."""
    root = RngState(spec.seed)
    train = _sample_split(spec, spec.n, spec.corr, spec.signal_sep, root.child(_TRAIN_STREAM).generator())
    test_corr = 1.0 / spec.n_biases
    test_sep = spec.signal_sep
    if spec.shift is not None:
        test_corr = spec.shift.corr
        if spec.shift.signal_sep is not None:
            test_sep = spec.shift.signal_sep
    test = _sample_split(spec, spec.test_size, test_corr, test_sep, root.child(_TEST_STREAM).generator())
    logger.info(
        "generated %d train / %d test rows (corr %.3f -> %.3f, %d groups)",
        len(train),
        len(test),
        spec.corr,
        test_corr,
        spec.n_targets * spec.n_biases,
    )
    return train, test


def apply_label_noise(
    labels: np.ndarray,
    rho: float,
    n_classes: int,
    rng: RngState | np.random.Generator,
) -> np.ndarray:
    """Move each label to a uniformly chosen wrong class with probability rho."""
    label_noise_channel(rho, n_classes)
    labels = as_labels(labels)
    if labels.size and labels.max() >= n_classes:
        raise ValueError(f"label {int(labels.max())} out of range for {n_classes} classes")
    if rho == 0.0:
        return labels.copy()
    generator = ensure_generator(rng)
    flip = generator.random(labels.shape[0]) < rho
    offsets = generator.integers(1, n_classes, size=labels.shape[0])
    return np.where(flip, (labels + offsets) % n_classes, labels)


def resample_by_class(dataset: LabeledDataset, rng: RngState | np.random.Generator) -> LabeledDataset:
    """Draw len(dataset) rows with replacement so each target class is equally likely.

    A dataset holding a single target class is resampled uniformly; any other
    dataset must contain every declared class.
    """
    if len(dataset) == 0:
        raise ValueError("cannot resample an empty dataset")
    counts = np.bincount(dataset.y, minlength=dataset.n_targets)
    present = np.count_nonzero(counts)
    if 1 < present < dataset.n_targets:
        empty = [int(label) for label in np.flatnonzero(counts == 0)]
        raise ConfigError(f"cannot balance target classes: class(es) {empty} have no rows")
    weights = 1.0 / (present * counts[dataset.y])
    generator = ensure_generator(rng)
    index = generator.choice(len(dataset), size=len(dataset), replace=True, p=weights / weights.sum())
    return dataset.subset(index)


def save_csv(dataset: LabeledDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"x{index}" for index in range(dataset.input_dim)] + ["y", "z"]
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row, y, z in zip(dataset.X, dataset.y, dataset.z):
            writer.writerow([*(format_float(value) for value in row), int(y), int(z)])
    return path


def load_csv(
    path: str | Path,
    n_targets: int | None = None,
    n_biases: int | None = None,
) -> LabeledDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file", line=1) from None
        for column in ("y", "z"):
            if column not in header:
                raise DatasetFormatError(f"{path}: missing '{column}' column", line=1)
        y_col = header.index("y")
        z_col = header.index("z")
        x_cols = [index for index, name in enumerate(header) if index not in (y_col, z_col)]
        expected = [f"x{index}" for index in range(len(x_cols))]
        if [header[index] for index in x_cols] != expected:
            raise DatasetFormatError(f"{path}: feature columns must be named x0..x{len(x_cols) - 1}", line=1)
        features: list[list[float]] = []
        ys: list[int] = []
        zs: list[int] = []
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}: expected {len(header)} fields, got {len(row)}", line=line_number
                )
            try:
                features.append([float(row[index]) for index in x_cols])
                ys.append(int(row[y_col]))
                zs.append(int(row[z_col]))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: {exc}", line=line_number) from exc
    X = np.asarray(features, dtype=np.float64).reshape(len(features), len(x_cols))
    if not np.all(np.isfinite(X)):
        raise DatasetFormatError(f"{path}: non-finite feature values")
    y = np.asarray(ys, dtype=np.int64)
    z = np.asarray(zs, dtype=np.int64)
    if y.size and (y.min() < 0 or z.min() < 0):
        raise DatasetFormatError(f"{path}: labels must be non-negative")
    n_targets = (int(y.max()) + 1 if y.size else 1) if n_targets is None else n_targets
    n_biases = (int(z.max()) + 1 if z.size else 1) if n_biases is None else n_biases
    try:
        return LabeledDataset(X, y, z, n_targets, n_biases)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
