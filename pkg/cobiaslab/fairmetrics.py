"""Group-fairness evaluation over (target, bias) groups."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .infomeasure import ContingencyTable, MIEstimate, label_noise_mi_curve
from .mine import EstimatorConfig, estimate_cobias
from .model import BiasModel
from .ndcore import RngState, constant
from .synthdata import LabeledDataset
from .utils import array_digest, as_labels

logger = logging.getLogger(__name__)

SUMMARY_FIELDS = (
    "unbiased_acc",
    "worst_group_acc",
    "best_group_acc",
    "disparity",
    "average_acc",
    "ba",
    "eo",
    "di",
    "cobias",
    "ratio_r",
    "has_empty_groups",
    "feature_digest",
)


class FairnessScores(NamedTuple):
    ba: float | None
    eo: float | None
    di: float | None


@dataclass(frozen=True, eq=False)
class GroupReport:
    """Per-group accuracies (NaN for empty groups) and their aggregates."""

    group_acc: np.ndarray
    group_n: np.ndarray
    unbiased_acc: float
    worst_group_acc: float
    best_group_acc: float
    disparity: float
    average_acc: float
    has_empty_groups: bool = False
    ba: float | None = None
    eo: float | None = None
    di: float | None = None
    cobias: MIEstimate | None = None
    ratio_r: float | None = None
    feature_digest: str | None = field(default=None)

    @property
    def n_targets(self) -> int:
        return self.group_acc.shape[0]

    @property
    def n_biases(self) -> int:
        return self.group_acc.shape[1]

    def field_names(self) -> list[str]:
        names = list(SUMMARY_FIELDS)
        for a in range(self.n_targets):
            for b in range(self.n_biases):
                names.extend((f"group_acc_y{a}_z{b}", f"group_n_y{a}_z{b}"))
        return names

    def to_dict(self) -> dict[str, object]:
        data: dict[str, object] = {
            "unbiased_acc": self.unbiased_acc,
            "worst_group_acc": self.worst_group_acc,
            "best_group_acc": self.best_group_acc,
            "disparity": self.disparity,
            "average_acc": self.average_acc,
            "ba": self.ba,
            "eo": self.eo,
            "di": self.di,
            "cobias": None if self.cobias is None else self.cobias.value,
            "ratio_r": self.ratio_r,
            "has_empty_groups": self.has_empty_groups,
            "feature_digest": self.feature_digest,
        }
        for a in range(self.n_targets):
            for b in range(self.n_biases):
                accuracy = float(self.group_acc[a, b])
                data[f"group_acc_y{a}_z{b}"] = None if math.isnan(accuracy) else accuracy
                data[f"group_n_y{a}_z{b}"] = int(self.group_n[a, b])
        return data

    def to_row(self) -> list[object]:
        data = self.to_dict()
        return [data[name] for name in self.field_names()]


def _check_aligned(y_pred: np.ndarray, y: np.ndarray, z: np.ndarray) -> None:
    if not y_pred.shape[0] == y.shape[0] == z.shape[0]:
        raise ValueError(
            f"predictions, targets and biases must be aligned, got {y_pred.shape[0]}, {y.shape[0]}, {z.shape[0]}"
        )


def group_accuracies(
    y_pred: Sequence[int],
    y: Sequence[int],
    z: Sequence[int],
    n_targets: int,
    n_biases: int,
) -> GroupReport:
    y_pred = as_labels(y_pred, "predictions")
    y = as_labels(y, "targets")
    z = as_labels(z, "biases")
    _check_aligned(y_pred, y, z)
    if y.size and (y.max() >= n_targets or z.max() >= n_biases):
        raise ValueError(f"labels out of range for a {n_targets}x{n_biases} group grid")
    groups = y * n_biases + z
    size = n_targets * n_biases
    counts = np.bincount(groups, minlength=size).reshape(n_targets, n_biases)
    correct = np.bincount(groups, weights=(y_pred == y).astype(np.float64), minlength=size)
    correct = correct.reshape(n_targets, n_biases)
    populated = counts > 0
    if not populated.any():
        raise ValueError("every group is empty; nothing to evaluate")
    accuracy = np.full((n_targets, n_biases), np.nan)
    accuracy[populated] = correct[populated] / counts[populated]
    has_empty = not populated.all()
    if has_empty:
        missing = ", ".join(f"(y={a}, z={b})" for a, b in np.argwhere(~populated))
        logger.warning("empty group(s) %s excluded from aggregates", missing)
    values = accuracy[populated]
    return GroupReport(
        group_acc=accuracy,
        group_n=counts,
        unbiased_acc=float(values.mean()),
        worst_group_acc=float(values.min()),
        best_group_acc=float(values.max()),
        disparity=float(values.max() - values.min()),
        average_acc=float(np.mean(y_pred == y)),
        has_empty_groups=has_empty,
    )


def _rate(mask: np.ndarray, events: np.ndarray) -> float | None:
    if not mask.any():
        return None
    return float(np.mean(events[mask]))


def extra_fairness(y_pred: Sequence[int], y: Sequence[int], z: Sequence[int]) -> FairnessScores:
    """Signed BA, EO and DI for binary target and bias.

    BA = p(pred=1, z=z*) - p(y=1, z=z*), with z* the bias value with the highest
    positive rate in the data; positive BA means the model over-associates.
    EO = |TPR(z=0) - TPR(z=1)|; DI = |p(pred=1 | z=0) - p(pred=1 | z=1)|.
    """
    y_pred = as_labels(y_pred, "predictions")
    y = as_labels(y, "targets")
    z = as_labels(z, "biases")
    _check_aligned(y_pred, y, z)
    for name, labels in (("predictions", y_pred), ("targets", y), ("biases", z)):
        if labels.size and labels.max() > 1:
            raise ValueError(f"BA/EO/DI need binary labels; {name} has value {int(labels.max())}")
    predicted_positive = y_pred == 1
    positive = y == 1

    rates = [_rate(z == b, positive) for b in (0, 1)]
    z_star = int(np.argmax([-1.0 if rate is None else rate for rate in rates]))
    in_star = z == z_star
    ba = float(np.mean(predicted_positive & in_star) - np.mean(positive & in_star))

    tpr = [_rate(positive & (z == b), predicted_positive) for b in (0, 1)]
    eo = None if None in tpr else abs(tpr[0] - tpr[1])

    selection = [_rate(z == b, predicted_positive) for b in (0, 1)]
    di = None if None in selection else abs(selection[0] - selection[1])
    return FairnessScores(ba, eo, di)


@dataclass(frozen=True)
class ReportConfig:
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    compute_cobias: bool = True
    rho: float = 0.0


def full_report(
    model: BiasModel,
    ds: LabeledDataset,
    cfg: ReportConfig,
    rng: RngState,
    train_labels: ContingencyTable | None = None,
) -> GroupReport:
    """Predictions, features, group metrics, Cobias and the label-noise ratio for one split."""
    features = model.features(ds.X)
    logits = model.head.forward(constant(features, "features")).value
    y_pred = np.argmax(logits, axis=1)
    report = group_accuracies(y_pred, ds.y, ds.z, ds.n_targets, ds.n_biases)

    scores = FairnessScores(None, None, None)
    if ds.n_targets == 2 and ds.n_biases == 2:
        scores = extra_fairness(y_pred, ds.y, ds.z)

    cobias = None
    if cfg.compute_cobias:
        cobias = estimate_cobias(
            features, ds.z, ds.y, cfg.estimator, rng, n_biases=ds.n_biases, n_targets=ds.n_targets
        )

    table = ds.yz_table() if train_labels is None else train_labels
    ratio_r = None
    if ds.n_targets >= 2:
        ratio_r = label_noise_mi_curve(table, [cfg.rho], n_classes=ds.n_targets)[0].ratio

    return replace(
        report,
        ba=scores.ba,
        eo=scores.eo,
        di=scores.di,
        cobias=cobias,
        ratio_r=ratio_r,
        feature_digest=array_digest(features),
    )
