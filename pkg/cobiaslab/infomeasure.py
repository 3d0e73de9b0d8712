"""Exact information quantities on discrete tables and closed-form oracles.

All values are in nats.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import rel_entr
from scipy.stats import entropy as _scipy_entropy

from .constants import ESTIMATOR_EXACT, ESTIMATOR_GAUSSIAN
from .errors import DatasetFormatError
from .utils import as_labels, format_float

logger = logging.getLogger(__name__)

_SUM_TOLERANCE = 1e-12
_NEGATIVE_TOLERANCE = 1e-12

Axes = int | Sequence[int]


@dataclass(frozen=True)
class MIEstimate:
    value: float
    estimator: str
    is_lower_bound: bool = False
    n_samples: int | None = None
    components: tuple["MIEstimate", ...] = field(default=(), compare=False)

    @property
    def clamped(self) -> float:
        return max(self.value, 0.0)

    def in_units(self, bits: bool = False) -> float:
        return self.value / np.log(2.0) if bits else self.value

    def to_dict(self, bits: bool = False) -> dict:
        data = {
            "value": self.in_units(bits),
            "clamped": max(self.in_units(bits), 0.0),
            "unit": "bits" if bits else "nats",
            "estimator": self.estimator,
            "is_lower_bound": self.is_lower_bound,
            "n_samples": self.n_samples,
        }
        if self.components:
            data["components"] = [component.to_dict(bits) for component in self.components]
        return data


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    """Joint probability table over two or three discrete variables."""

    probs: np.ndarray
    n_samples: int | None = None

    def __post_init__(self) -> None:
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim not in (2, 3):
            raise ValueError(f"contingency table must have arity 2 or 3, got {probs.ndim}")
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0):
            raise ValueError("contingency table entries must be finite and non-negative")
        total = probs.sum()
        if abs(total - 1.0) > _SUM_TOLERANCE:
            raise ValueError(f"contingency table must sum to 1, got {total!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_probs(cls, probs: Iterable) -> "ContingencyTable":
        return cls(np.asarray(probs, dtype=np.float64))

    @classmethod
    def from_counts(cls, counts: Iterable) -> "ContingencyTable":
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            raise ValueError("cannot build a table from zero counts")
        return cls(counts / total, n_samples=int(round(total)))

    @classmethod
    def from_samples(
        cls,
        *labels: Iterable[int],
        cardinalities: Sequence[int] | None = None,
    ) -> "ContingencyTable":
        columns = [as_labels(column, f"axis {axis}") for axis, column in enumerate(labels)]
        if len(columns) not in (2, 3):
            raise ValueError(f"need 2 or 3 label arrays, got {len(columns)}")
        n = columns[0].shape[0]
        if n == 0 or any(column.shape[0] != n for column in columns):
            raise ValueError("label arrays must be non-empty and equally long")
        if cardinalities is None:
            cardinalities = [int(column.max()) + 1 for column in columns]
        for axis, (column, size) in enumerate(zip(columns, cardinalities)):
            if column.max() >= size:
                raise ValueError(f"axis {axis}: label {int(column.max())} exceeds cardinality {size}")
        flat = np.ravel_multi_index(tuple(columns), tuple(cardinalities))
        counts = np.bincount(flat, minlength=int(np.prod(cardinalities)))
        return cls.from_counts(counts.reshape(tuple(cardinalities)))

    @property
    def arity(self) -> int:
        return self.probs.ndim

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(self.probs.shape)

    def marginal(self, axes: Axes) -> np.ndarray:
        keep = _normalize_axes(axes, self.arity)
        drop = tuple(axis for axis in range(self.arity) if axis not in keep)
        reduced = self.probs.sum(axis=drop) if drop else self.probs
        # sum() keeps the remaining axes in ascending order; restore the requested order.
        order = sorted(keep)
        return np.transpose(reduced, [order.index(axis) for axis in keep])


def _normalize_axes(axes: Axes, arity: int) -> tuple[int, ...]:
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    normalized = tuple(int(axis) for axis in axes)
    if not normalized or len(set(normalized)) != len(normalized):
        raise ValueError(f"invalid axes {axes}")
    for axis in normalized:
        if not 0 <= axis < arity:
            raise ValueError(f"axis {axis} out of range for arity {arity}")
    return normalized


def _entropy_of(probs: np.ndarray) -> float:
    flat = probs.reshape(-1)
    if flat.sum() <= 0.0:
        return 0.0
    return float(_scipy_entropy(flat))


def _nonzero_cells(probs: np.ndarray) -> int:
    return int(np.count_nonzero(probs))


def entropy(table: ContingencyTable, axis: Axes | None = None) -> float:
    """Shannon entropy of the marginal over `axis` (all axes when None)."""
    if axis is None:
        return _entropy_of(table.probs)
    return _entropy_of(table.marginal(axis))


def conditional_entropy(table: ContingencyTable, target: Axes, given: Axes) -> float:
    target_axes = _normalize_axes(target, table.arity)
    given_axes = _normalize_axes(given, table.arity)
    return entropy(table, target_axes + given_axes) - entropy(table, given_axes)


def _mi_of_matrix(joint: np.ndarray) -> float:
    left = joint.sum(axis=1, keepdims=True)
    right = joint.sum(axis=0, keepdims=True)
    return float(rel_entr(joint, left * right).sum())


def _miller_madow_mi_correction(joint: np.ndarray, n_samples: int) -> float:
    cells_left = _nonzero_cells(joint.sum(axis=1))
    cells_right = _nonzero_cells(joint.sum(axis=0))
    cells_joint = _nonzero_cells(joint)
    return ((cells_left - 1) + (cells_right - 1) - (cells_joint - 1)) / (2.0 * n_samples)


def _require_samples(table: ContingencyTable) -> int:
    if table.n_samples is None:
        raise ValueError("Miller-Madow correction needs a table built from sample counts")
    return table.n_samples


def _clamp(value: float) -> float:
    if value < -_NEGATIVE_TOLERANCE:
        logger.debug("negative information value %.3e clamped to 0", value)
    return max(value, 0.0)


def exact_mi(table: ContingencyTable, miller_madow: bool = False) -> MIEstimate:
    if table.arity != 2:
        raise ValueError(f"exact_mi needs an arity-2 table, got arity {table.arity}")
    value = _mi_of_matrix(table.probs)
    if miller_madow:
        value += _miller_madow_mi_correction(table.probs, _require_samples(table))
    return MIEstimate(_clamp(value), ESTIMATOR_EXACT, False, table.n_samples)


def exact_conditional_mi(
    table: ContingencyTable,
    given: int = 2,
    miller_madow: bool = False,
) -> MIEstimate:
    """I(U;V|W) where W is the `given` axis of an arity-3 table."""
    if table.arity != 3:
        raise ValueError(f"exact_conditional_mi needs an arity-3 table, got arity {table.arity}")
    given = _normalize_axes(given, 3)[0]
    slices = np.moveaxis(table.probs, given, -1)
    n_samples = _require_samples(table) if miller_madow else None
    value = 0.0
    for index in range(slices.shape[-1]):
        joint = slices[..., index]
        weight = joint.sum()
        if weight <= 0.0:
            continue
        conditional = joint / weight
        slice_mi = _mi_of_matrix(conditional)
        if miller_madow:
            slice_mi += _miller_madow_mi_correction(conditional, max(1, int(round(weight * n_samples))))
        value += weight * slice_mi
    return MIEstimate(_clamp(value), ESTIMATOR_EXACT, False, table.n_samples)


def grouped_mi(table: ContingencyTable, left: Axes, right: Axes) -> MIEstimate:
    """I(left axes ; right axes), each group flattened into one variable."""
    left_axes = _normalize_axes(left, table.arity)
    right_axes = _normalize_axes(right, table.arity)
    if set(left_axes) & set(right_axes):
        raise ValueError("left and right axes must be disjoint")
    joint = table.marginal(left_axes + right_axes)
    rows = int(np.prod([table.cardinalities[axis] for axis in left_axes]))
    matrix = joint.reshape(rows, -1)
    return MIEstimate(_clamp(_mi_of_matrix(matrix)), ESTIMATOR_EXACT, False, table.n_samples)


def gaussian_mi_oracle(rho: float) -> float:
    """Closed-form MI of a standard bivariate Gaussian with correlation rho."""
    rho = float(rho)
    if not abs(rho) < 1.0:
        raise ValueError(f"correlation must satisfy |rho| < 1, got {rho}")
    return float(-0.5 * np.log1p(-rho * rho))


def gaussian_mi_from_samples(u: Iterable[float], v: Iterable[float]) -> MIEstimate:
    """Plug the sample Pearson correlation into the Gaussian closed form."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape or u.size < 3:
        raise ValueError("gaussian estimator needs two equally long 1-d samples of size >= 3")
    if np.std(u) == 0.0 or np.std(v) == 0.0:
        raise ValueError("gaussian estimator needs non-constant samples")
    rho = float(np.corrcoef(u, v)[0, 1])
    rho = float(np.clip(rho, -1.0 + 1e-15, 1.0 - 1e-15))
    return MIEstimate(gaussian_mi_oracle(rho), ESTIMATOR_GAUSSIAN, False, int(u.size))


@dataclass(frozen=True)
class LabelNoisePoint:
    rho: float
    mi_bias_noisy: float
    mi_target_noisy: float
    ratio: float | None


def _check_noise_rate(rho: float, n_classes: int) -> None:
    if n_classes < 2:
        raise ValueError(f"label noise needs at least 2 classes, got {n_classes}")
    upper = 1.0 - 1.0 / n_classes
    if not 0.0 <= rho < upper:
        raise ValueError(f"noise rate must lie in [0, {upper:g}) for {n_classes} classes, got {rho}")


def label_noise_channel(rho: float, n_classes: int) -> np.ndarray:
    """Row-stochastic matrix p(noisy = k | true = y): 1 - rho on the diagonal, rho/(K-1) elsewhere."""
    rho = float(rho)
    _check_noise_rate(rho, n_classes)
    channel = np.full((n_classes, n_classes), rho / (n_classes - 1))
    np.fill_diagonal(channel, 1.0 - rho)
    return channel


def label_noise_mi_curve(
    joint_yz: ContingencyTable,
    rhos: Iterable[float],
    n_classes: int | None = None,
) -> list[LabelNoisePoint]:
    """Exact I(Z;Ỹ), I(Y;Ỹ) and their ratio for each noise rate; Y is axis 0 of the table."""
    if joint_yz.arity != 2:
        raise ValueError("label_noise_mi_curve needs an arity-2 (Y, Z) table")
    n_targets = joint_yz.cardinalities[0]
    n_classes = n_targets if n_classes is None else int(n_classes)
    if n_classes < n_targets:
        raise ValueError(f"class count {n_classes} smaller than target cardinality {n_targets}")
    joint = joint_yz.probs
    if n_classes > n_targets:
        joint = np.pad(joint, ((0, n_classes - n_targets), (0, 0)))
    points: list[LabelNoisePoint] = []
    for rho in rhos:
        channel = label_noise_channel(rho, n_classes)
        # p(y, z, ỹ) = p(y, z) · p(ỹ | y)
        triple = joint[:, :, None] * channel[:, None, :]
        bias_noisy = triple.sum(axis=0)
        target_noisy = triple.sum(axis=1)
        mi_bias = _clamp(_mi_of_matrix(bias_noisy))
        mi_target = _clamp(_mi_of_matrix(target_noisy))
        ratio = mi_bias / mi_target if mi_target > 0.0 else None
        points.append(LabelNoisePoint(float(rho), mi_bias, mi_target, ratio))
    return points


def save_table_csv(table: ContingencyTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"i{axis}" for axis in range(table.arity)] + ["p"]
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for index in np.ndindex(*table.cardinalities):
            writer.writerow([*index, format_float(table.probs[index])])
    return path


def load_table_csv(path: str | Path) -> ContingencyTable:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise DatasetFormatError(f"{path}: empty table file", line=1)
    header = rows[0]
    if len(header) < 3 or header[-1] != "p":
        raise DatasetFormatError(f"{path}: header must be i0,i1[,i2],p", line=1)
    arity = len(header) - 1
    cells: list[tuple[tuple[int, ...], float]] = []
    for line_number, row in enumerate(rows[1:], start=2):
        if len(row) != arity + 1:
            raise DatasetFormatError(f"{path}: expected {arity + 1} fields, got {len(row)}", line=line_number)
        try:
            index = tuple(int(value) for value in row[:arity])
            probability = float(row[arity])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}", line=line_number) from exc
        cells.append((index, probability))
    if not cells:
        raise DatasetFormatError(f"{path}: no cells", line=2)
    shape = tuple(max(index[axis] for index, _ in cells) + 1 for axis in range(arity))
    probs = np.zeros(shape)
    for index, probability in cells:
        probs[index] = probability
    return ContingencyTable.from_probs(probs)
