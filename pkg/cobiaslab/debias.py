"""Training loops: ERM, label noise, the Cobias regularizer, Group DRO and the linear probe.

All methods share one trainer. A method string names a base (`erm` or
`group_dro`) plus optional `+noise` / `+regularizer` flags. Random streams are
keyed by how many model epochs have run, so switching a component off (beta = 0,
rho = 0, eta = 0) reproduces the plain run exactly.
"""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .constants import (
    ALTERNATE_EPOCH,
    ALTERNATE_STEP,
    METHOD_ERM,
    METHOD_GROUP_DRO,
    METHOD_NOISE,
    METHOD_REGULARIZER,
    MIN_DV_BATCH,
)
from .errors import NumericalError, TrainingDiverged
from .fairmetrics import SUMMARY_FIELDS, GroupReport, ReportConfig, full_report
from .infomeasure import label_noise_channel
from .mine import EstimatorConfig, StatisticsNetwork, dv_bound, surrogate_bias_term, surrogate_inputs
from .model import BiasModel
from .ndcore import RngState
from .synthdata import LabeledDataset, apply_label_noise, resample_by_class
from .utils import format_float

logger = logging.getLogger(__name__)

# Stream keys under RngState(cfg.seed).
_STREAM_ORDER = 0
_STREAM_RESAMPLE = 1
_STREAM_NOISE = 2
_STREAM_SURROGATE = 3
_STREAM_CRITIC = 4
_STREAM_CRITIC_INIT = 5
_STREAM_REPORT = 6
_STREAM_PROBE = 7

_BASES = (METHOD_ERM, METHOD_GROUP_DRO)
_FLAGS = (METHOD_NOISE, METHOD_REGULARIZER)


@dataclass(frozen=True)
class MethodFlags:
    base: str = METHOD_ERM
    noise: bool = False
    regularizer: bool = False

    @property
    def name(self) -> str:
        parts = [self.base]
        if self.noise:
            parts.append(METHOD_NOISE)
        if self.regularizer:
            parts.append(METHOD_REGULARIZER)
        return "+".join(parts)


def parse_method(method: str) -> MethodFlags:
    """`erm`, `noise`, `regularizer`, `group_dro` and '+'-joined combinations."""
    tokens = [token.strip() for token in method.split("+") if token.strip()]
    if not tokens:
        raise ValueError("method must not be empty")
    unknown = [token for token in tokens if token not in _BASES + _FLAGS]
    if unknown:
        raise ValueError(f"unknown method component(s) {unknown}; choose from {list(_BASES + _FLAGS)}")
    if len(set(tokens)) != len(tokens):
        raise ValueError(f"method '{method}' repeats a component")
    bases = [token for token in tokens if token in _BASES]
    if len(bases) > 1:
        raise ValueError(f"method '{method}' combines {bases}; pick one base")
    return MethodFlags(
        base=bases[0] if bases else METHOD_ERM,
        noise=METHOD_NOISE in tokens,
        regularizer=METHOD_REGULARIZER in tokens,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch: int = 256
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta: float = 5.0
    rho: float = 0.2
    method: str = METHOD_ERM
    dro_eta: float = 0.01
    critic: EstimatorConfig = field(default_factory=lambda: EstimatorConfig(lr=1e-3))
    alternation: str = ALTERNATE_EPOCH
    critic_cold_start: bool = False
    resample: bool = True
    report_every: int = 0
    probe_epochs: int = 20
    probe_keep_head: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.dro_eta < 0.0:
            raise ValueError(f"dro_eta must be >= 0, got {self.dro_eta}")
        if self.alternation not in (ALTERNATE_EPOCH, ALTERNATE_STEP):
            raise ValueError(f"alternation must be '{ALTERNATE_EPOCH}' or '{ALTERNATE_STEP}', got '{self.alternation}'")
        if self.report_every < 0:
            raise ValueError(f"report_every must be >= 0, got {self.report_every}")
        if self.probe_epochs < 0:
            raise ValueError(f"probe_epochs must be >= 0, got {self.probe_epochs}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "method", parse_method(self.method).name)

    @property
    def flags(self) -> MethodFlags:
        return parse_method(self.method)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    task_loss: float
    regularizer: float
    critic_bound: float
    model_checksum: str
    critic_checksum: str = ""
    train_report: dict[str, object] | None = None
    test_report: dict[str, object] | None = None


_LOG_FIELDS = ["epoch", "phase", "task_loss", "regularizer", "critic_bound", "model_checksum", "critic_checksum"]


class TrainLog:
    def __init__(self, method: str = METHOD_ERM) -> None:
        self.method = method
        self.records: list[EpochRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)

    def last(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None

    def field_names(self) -> list[str]:
        names = list(_LOG_FIELDS)
        for split in ("train", "test"):
            names.extend(f"{split}_{name}" for name in SUMMARY_FIELDS)
        return names

    def rows(self) -> list[list[str]]:
        rows = []
        for record in self.records:
            row = [
                str(record.epoch),
                record.phase,
                _cell(record.task_loss),
                _cell(record.regularizer),
                _cell(record.critic_bound),
                record.model_checksum,
                record.critic_checksum,
            ]
            for snapshot in (record.train_report, record.test_report):
                row.extend(_cell(None if snapshot is None else snapshot.get(name)) for name in SUMMARY_FIELDS)
            rows.append(row)
        return rows

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(self.field_names())
            writer.writerows(self.rows())
        return path


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else format_float(value)
    return str(value)


@dataclass
class FitResult:
    model: BiasModel
    critic: StatisticsNetwork | None
    log: TrainLog


def _per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return log_norm - shifted[np.arange(labels.shape[0]), labels]


class _GroupWeights:
    """Multiplicative-weights mixture over (y, z) groups."""

    def __init__(self, n_groups: int, eta: float) -> None:
        self.eta = eta
        self.q = np.full(n_groups, 1.0 / n_groups)

    def sample_weights(self, groups: np.ndarray, losses: np.ndarray) -> np.ndarray:
        counts = np.bincount(groups, minlength=self.q.shape[0])
        present = counts > 0
        group_loss = np.zeros_like(self.q)
        group_loss[present] = np.bincount(groups, weights=losses, minlength=self.q.shape[0])[present] / counts[present]
        if self.eta > 0.0:
            self.q[present] = self.q[present] * np.exp(self.eta * group_loss[present])
            self.q = self.q / self.q.sum()
        share = self.q[groups] / self.q[present].sum()
        return share / counts[groups]


def _make_critic(model: BiasModel, ds: LabeledDataset, cfg: TrainConfig, rng: RngState) -> StatisticsNetwork:
    return StatisticsNetwork(
        model.feature_dim + ds.n_targets,
        ds.n_biases,
        rng,
        hidden=cfg.critic.hidden,
        clip=cfg.critic.clip,
    )


class _Trainer:
    def __init__(
        self,
        model: BiasModel,
        ds: LabeledDataset,
        cfg: TrainConfig,
        critic: StatisticsNetwork | None,
        eval_ds: LabeledDataset | None,
        report_cfg: ReportConfig | None,
    ) -> None:
        self.flags = cfg.flags
        if model.input_dim != ds.input_dim:
            raise ValueError(f"model expects {model.input_dim} inputs, dataset has {ds.input_dim}")
        if model.n_classes != ds.n_targets:
            raise ValueError(f"model has {model.n_classes} classes, dataset has {ds.n_targets} targets")
        if len(ds) == 0:
            raise ValueError("cannot train on an empty dataset")
        if self.flags.noise:
            label_noise_channel(cfg.rho, ds.n_targets)
        self.model = model.copy()
        self.ds = ds
        self.cfg = cfg
        self.root = RngState(cfg.seed)
        self.eval_ds = eval_ds
        self.report_cfg = report_cfg
        self.model_state = nd.AdamState()
        self.critic_state = nd.AdamState()
        self.critic: StatisticsNetwork | None = None
        if self.flags.regularizer:
            if critic is None:
                critic = _make_critic(model, ds, cfg, self.root.child(_STREAM_CRITIC_INIT))
            self.critic = _copy_critic(critic)
            expected = model.feature_dim + ds.n_targets + ds.n_biases
            if self.critic.input_dim != expected:
                raise ValueError(
                    f"critic input width {self.critic.input_dim} does not match d_f + A + B = {expected}"
                )
        self.group_weights = (
            _GroupWeights(ds.n_targets * ds.n_biases, cfg.dro_eta) if self.flags.base == METHOD_GROUP_DRO else None
        )
        self.model_epochs = 0
        self.critic_epochs = 0
        self.log = TrainLog(cfg.method)

    # -- phases -----------------------------------------------------------------

    def _phase(self, epoch: int) -> str:
        if not self.flags.regularizer:
            return "model"
        if self.cfg.alternation == ALTERNATE_STEP:
            return "both"
        return "model" if epoch % 2 == 0 else "critic"

    def _uses_surrogate(self) -> bool:
        return self.flags.regularizer and self.cfg.beta > 0.0

    def _batches(self, n: int, order: np.ndarray):
        for start in range(0, n, self.cfg.batch):
            yield order[start : start + self.cfg.batch]

    def _model_step(
        self,
        batch: LabeledDataset,
        noise_rng: np.random.Generator,
        surrogate_rng: np.random.Generator,
    ) -> tuple[float, float | None]:
        labels = batch.y
        if self.flags.noise:
            labels = apply_label_noise(batch.y, self.cfg.rho, batch.n_targets, noise_rng)
        features, logits = self.model.forward(batch.X)
        weights = None
        if self.group_weights is not None:
            weights = self.group_weights.sample_weights(batch.groups, _per_sample_loss(logits.value, labels))
        loss = nd.softmax_cross_entropy(logits, labels, weights)
        objective = loss
        regularizer = None
        if self._uses_surrogate() and len(batch) >= MIN_DV_BATCH:
            term = surrogate_bias_term(
                self.critic, features, batch.y, batch.z, batch.n_targets, batch.n_biases, surrogate_rng
            )
            regularizer = term.item()
            objective = nd.add(loss, nd.scale(term, self.cfg.beta))
        grads = nd.backward(objective)
        nd.adam_step(self.model.trainable_parameters(), grads, self.model_state, self.cfg.lr, self.cfg.weight_decay)
        return loss.item(), regularizer

    def _critic_step(self, features: np.ndarray, batch: LabeledDataset, rng: np.random.Generator) -> float:
        u, v = surrogate_inputs(nd.constant(features, "features"), batch.y, batch.z, batch.n_targets, batch.n_biases)
        result = dv_bound(self.critic, u, v, rng)
        grads = nd.backward(nd.scale(result.bound, -1.0))
        nd.adam_step(self.critic.parameters(), grads, self.critic_state, self.cfg.critic.lr)
        return result.bound_value

    def _critic_bound(self, rng: np.random.Generator) -> float:
        features = self.model.features(self.ds.X)
        u, v = surrogate_inputs(
            nd.constant(features, "features"), self.ds.y, self.ds.z, self.ds.n_targets, self.ds.n_biases
        )
        value = dv_bound(self.critic, u, v, rng).bound_value
        if not math.isfinite(value) or abs(value) > self.cfg.critic.divergence_limit:
            raise NumericalError(
                f"critic bound diverged ({value:.4g} nats); try a smaller beta or critic learning rate"
            )
        return value

    def _train_data(self) -> LabeledDataset:
        if not self.cfg.resample:
            return self.ds
        return resample_by_class(self.ds, self.root.child(_STREAM_RESAMPLE, self.model_epochs))

    def _run_model_epoch(self, with_critic: bool) -> tuple[float, float, float]:
        k = self.model_epochs
        data = self._train_data()
        order = self.root.child(_STREAM_ORDER, k).generator().permutation(len(data))
        noise_rng = self.root.child(_STREAM_NOISE, k).generator()
        surrogate_rng = self.root.child(_STREAM_SURROGATE, k).generator()
        critic_rng = self.root.child(_STREAM_CRITIC, self.critic_epochs).generator()
        total_loss = 0.0
        total_reg = 0.0
        reg_rows = 0
        critic_values: list[float] = []
        for index in self._batches(len(data), order):
            batch = data.subset(index)
            loss, regularizer = self._model_step(batch, noise_rng, surrogate_rng)
            total_loss += loss * len(batch)
            if regularizer is not None:
                total_reg += regularizer * len(batch)
                reg_rows += len(batch)
            if with_critic and len(batch) >= MIN_DV_BATCH:
                critic_values.append(self._critic_step(self.model.features(batch.X), batch, critic_rng))
        self.model_epochs += 1
        critic_bound = math.nan
        if with_critic:
            self.critic_epochs += 1
            critic_bound = self._critic_bound(critic_rng)
        return total_loss / len(data), total_reg / reg_rows if reg_rows else math.nan, critic_bound

    def _run_critic_epoch(self) -> float:
        c = self.critic_epochs
        if self.cfg.critic_cold_start and c > 0:
            self.critic.reinitialize(self.root.child(_STREAM_CRITIC_INIT, c))
            self.critic_state = nd.AdamState()
        rng = self.root.child(_STREAM_CRITIC, c).generator()
        features = self.model.features(self.ds.X)
        order = rng.permutation(len(self.ds))
        for index in self._batches(len(self.ds), order):
            if index.shape[0] < MIN_DV_BATCH:
                continue
            self._critic_step(features[index], self.ds.subset(index), rng)
        self.critic_epochs += 1
        return self._critic_bound(rng)

    # -- bookkeeping ------------------------------------------------------------

    def _snapshot(self) -> dict[str, object]:
        state: dict[str, object] = {"model": self.model.state_dict()}
        if self.critic is not None:
            state["critic"] = self.critic.mlp.state_dict()
        return state

    def _restore(self, state: dict[str, object]) -> None:
        self.model.load_state_dict(state["model"])
        if self.critic is not None:
            self.critic.mlp.load_state_dict(state["critic"])

    def _checkpoint(self) -> dict:
        data = {"model": self.model.to_checkpoint()}
        if self.critic is not None:
            data["critic"] = self.critic.to_checkpoint()
        return data

    def _reports(self, epoch: int) -> tuple[dict | None, dict | None]:
        every = self.cfg.report_every
        if not every or self.report_cfg is None or (epoch + 1) % every:
            return None, None
        rng = self.root.child(_STREAM_REPORT, epoch)
        train = full_report(self.model, self.ds, self.report_cfg, rng.child(0)).to_dict()
        test = None
        if self.eval_ds is not None:
            test = full_report(
                self.model, self.eval_ds, self.report_cfg, rng.child(1), train_labels=self.ds.yz_table()
            ).to_dict()
        return train, test

    def run(self) -> FitResult:
        last_good = self._snapshot()
        for epoch in range(self.cfg.epochs):
            phase = self._phase(epoch)
            loss = regularizer = bound = math.nan
            try:
                if phase == "critic":
                    bound = self._run_critic_epoch()
                else:
                    loss, regularizer, bound = self._run_model_epoch(with_critic=phase == "both")
                if not math.isnan(loss) and not math.isfinite(loss):
                    raise NumericalError(f"non-finite task loss {loss}")
            except NumericalError as exc:
                self._restore(last_good)
                hint = " (try a smaller beta)" if self.flags.regularizer else ""
                raise TrainingDiverged(
                    f"epoch {epoch} ({phase}): {exc}{hint}", checkpoint=self._checkpoint()
                ) from exc
            last_good = self._snapshot()
            train_report, test_report = self._reports(epoch)
            record = EpochRecord(
                epoch=epoch,
                phase=phase,
                task_loss=loss,
                regularizer=regularizer,
                critic_bound=bound,
                model_checksum=self.model.checksum(),
                critic_checksum="" if self.critic is None else self.critic.checksum(),
                train_report=train_report,
                test_report=test_report,
            )
            self.log.append(record)
            logger.info(
                "%s epoch %d/%d [%s] loss %.4f reg %.4f critic %.4f",
                self.cfg.method,
                epoch + 1,
                self.cfg.epochs,
                phase,
                loss,
                regularizer,
                bound,
            )
        return FitResult(self.model, self.critic, self.log)


def _copy_critic(critic: StatisticsNetwork) -> StatisticsNetwork:
    return StatisticsNetwork.from_checkpoint(critic.to_checkpoint())


def fit(
    model: BiasModel,
    ds: LabeledDataset,
    cfg: TrainConfig,
    critic: StatisticsNetwork | None = None,
    eval_ds: LabeledDataset | None = None,
    report_cfg: ReportConfig | None = None,
) -> FitResult:
    """Train a copy of `model` (and of `critic`) with the method named in cfg.method."""
    return _Trainer(model, ds, cfg, critic, eval_ds, report_cfg).run()


def train_erm(model: BiasModel, ds: LabeledDataset, cfg: TrainConfig, **kwargs) -> tuple[BiasModel, TrainLog]:
    result = fit(model, ds, replace(cfg, method=METHOD_ERM), **kwargs)
    return result.model, result.log


def train_label_noise(
    model: BiasModel, ds: LabeledDataset, cfg: TrainConfig, **kwargs
) -> tuple[BiasModel, TrainLog]:
    result = fit(model, ds, replace(cfg, method=METHOD_NOISE), **kwargs)
    return result.model, result.log


def train_with_regularizer(
    model: BiasModel,
    critic: StatisticsNetwork | None,
    ds: LabeledDataset,
    cfg: TrainConfig,
    **kwargs,
) -> tuple[BiasModel, StatisticsNetwork, TrainLog]:
    result = fit(model, ds, replace(cfg, method=METHOD_REGULARIZER), critic=critic, **kwargs)
    return result.model, result.critic, result.log


def train_group_dro(
    model: BiasModel, ds: LabeledDataset, cfg: TrainConfig, **kwargs
) -> tuple[BiasModel, TrainLog]:
    result = fit(model, ds, replace(cfg, method=METHOD_GROUP_DRO), **kwargs)
    return result.model, result.log


@dataclass(frozen=True)
class ProbeResult:
    before: GroupReport
    after: GroupReport
    probe: BiasModel


def linear_probe_experiment(
    trained: BiasModel,
    ds: LabeledDataset,
    cfg: TrainConfig,
    report_cfg: ReportConfig,
    eval_ds: LabeledDataset | None = None,
) -> ProbeResult:
    """Freeze the extractor, retrain the head with class resampling, report before and after."""
    eval_ds = ds if eval_ds is None else eval_ds
    root = RngState(cfg.seed).child(_STREAM_PROBE)
    train_labels = ds.yz_table()
    before = full_report(trained, eval_ds, report_cfg, root.child(0), train_labels=train_labels)
    probe = trained.copy()
    probe.freeze_extractor()
    if not cfg.probe_keep_head:
        probe.reset_head(root.child(1))
    probe_cfg = replace(cfg, method=METHOD_ERM, epochs=cfg.probe_epochs, resample=True, report_every=0)
    probe = fit(probe, ds, probe_cfg).model
    after = full_report(probe, eval_ds, report_cfg, root.child(0), train_labels=train_labels)
    logger.info(
        "linear probe: worst-group %.4f -> %.4f, unbiased %.4f -> %.4f",
        before.worst_group_acc,
        after.worst_group_acc,
        before.unbiased_acc,
        after.unbiased_acc,
    )
    return ProbeResult(before, after, probe)
