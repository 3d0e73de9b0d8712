import hashlib
from typing import Iterable

import numpy as np


def _parse_bool(value: str) -> bool | None:
    normalized = value.strip().lower()
    if normalized in {"1", "true", "yes", "on"}:
        return True
    if normalized in {"0", "false", "no", "off"}:
        return False
    return None


def format_float(value: float) -> str:
    # 17 significant digits round-trip every float64 exactly.
    return format(float(value), ".17g")


def as_labels(values: Iterable[int], name: str = "labels") -> np.ndarray:
    labels = np.asarray(values)
    if labels.ndim != 1:
        labels = labels.reshape(-1)
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        rounded = np.rint(labels)
        if not np.array_equal(rounded, labels):
            raise ValueError(f"{name} must be integer class indices")
        labels = rounded
    labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError(f"{name} must be non-negative")
    return labels


def one_hot(labels: Iterable[int], n_classes: int) -> np.ndarray:
    index = as_labels(labels)
    if index.size and index.max() >= n_classes:
        raise ValueError(
            f"label {int(index.max())} out of range for {n_classes} classes"
        )
    encoded = np.zeros((index.shape[0], n_classes), dtype=np.float64)
    encoded[np.arange(index.shape[0]), index] = 1.0
    return encoded


def array_digest(array: np.ndarray) -> str:
    contiguous = np.ascontiguousarray(array)
    digest = hashlib.sha256()
    digest.update(str(contiguous.dtype).encode("ascii"))
    digest.update(repr(contiguous.shape).encode("ascii"))
    digest.update(contiguous.tobytes())
    return digest.hexdigest()
