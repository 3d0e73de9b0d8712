"""Donsker-Varadhan neural lower bound on mutual information (MINE).

The bound for a critic T is  E_joint[T] - log E_marginal[exp T],  with the
product of marginals approximated by permuting the rows of the second
variable within a batch.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import ndcore as nd
from .constants import (
    CRITIC_CLIP,
    DIVERGENCE_LIMIT_NATS,
    ESTIMATOR_DV,
    ESTIMATOR_DV_DIFFERENCE,
    MIN_DV_BATCH,
)
from .errors import ConfigError, NumericalError
from .infomeasure import MIEstimate
from .model import CHECKPOINT_FORMAT, decode_parameters, encode_parameters
from .ndcore import Node, RngState
from .utils import as_labels, one_hot

logger = logging.getLogger(__name__)

RngLike = RngState | np.random.Generator


@dataclass(frozen=True)
class EstimatorConfig:
    epochs: int = 60
    batch: int = 256
    lr: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    eval_window: int = 10
    clip: float = CRITIC_CLIP
    divergence_limit: float = DIVERGENCE_LIMIT_NATS
    ema_decay: float = 0.0
    min_samples: int = 1000

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"estimator epochs must be >= 1, got {self.epochs}")
        if self.batch < MIN_DV_BATCH:
            raise ValueError(f"estimator batch must be >= {MIN_DV_BATCH}, got {self.batch}")
        if self.lr <= 0.0:
            raise ValueError(f"estimator lr must be positive, got {self.lr}")
        if not self.hidden or any(width < 1 for width in self.hidden):
            raise ValueError(f"estimator hidden widths must be positive, got {self.hidden}")
        if self.eval_window < 1:
            raise ValueError(f"eval_window must be >= 1, got {self.eval_window}")
        if self.clip < 0.0:
            raise ValueError(f"clip must be >= 0 (0 disables), got {self.clip}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.min_samples < 1:
            raise ValueError(f"min_samples must be >= 1, got {self.min_samples}")


class StatisticsNetwork:
    """Critic f_φ(u, v): tanh MLP over the concatenated pair, scalar output."""

    def __init__(
        self,
        u_dim: int,
        v_dim: int,
        rng: RngLike,
        hidden: Sequence[int] = (64, 64),
        clip: float = CRITIC_CLIP,
    ) -> None:
        self.u_dim = int(u_dim)
        self.v_dim = int(v_dim)
        self.clip = float(clip)
        self.mlp = nd.MLP([self.u_dim + self.v_dim, *hidden, 1], rng, activation="tanh", name="critic")

    @property
    def input_dim(self) -> int:
        return self.u_dim + self.v_dim

    def score(self, u: Node, v: Node) -> Node:
        raw = self.mlp.forward(nd.concat([u, v], axis=1))
        if self.clip > 0.0:
            return nd.soft_clip(raw, self.clip)
        return raw

    def parameters(self) -> list[Node]:
        return self.mlp.parameters()

    def reinitialize(self, rng: RngLike) -> None:
        self.mlp.reinitialize(rng)

    def checksum(self) -> str:
        return self.mlp.checksum()

    def to_checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "critic",
            "u_dim": self.u_dim,
            "v_dim": self.v_dim,
            "hidden": list(self.mlp.sizes[1:-1]),
            "clip": self.clip,
            "parameters": encode_parameters(self.mlp.state_dict()),
        }

    @classmethod
    def from_checkpoint(cls, data: Mapping) -> "StatisticsNetwork":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("kind") != "critic":
            raise ConfigError("not a critic checkpoint")
        try:
            net = cls(
                int(data["u_dim"]),
                int(data["v_dim"]),
                RngState(0),
                hidden=[int(width) for width in data["hidden"]],
                clip=float(data["clip"]),
            )
            net.mlp.load_state_dict(decode_parameters(data["parameters"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid critic checkpoint: {exc}") from exc
        return net


@dataclass(frozen=True)
class DvBatchResult:
    bound_value: float
    joint_term: float
    marginal_term: float
    bound: Node
    joint_mean: Node
    marginal_scores: Node


def _as_node(value: Node | np.ndarray, name: str) -> Node:
    if isinstance(value, Node):
        return value
    return nd.constant(value, name)


def draw_permutation(n: int, rng: RngLike) -> np.ndarray:
    generator = nd.ensure_generator(rng)
    perm = generator.permutation(n)
    if np.array_equal(perm, np.arange(n)):
        logger.debug("identity permutation drawn for batch of %d; redrawing once", n)
        perm = generator.permutation(n)
    return perm


def dv_bound(
    net: StatisticsNetwork,
    u_batch: Node | np.ndarray,
    v_batch: Node | np.ndarray,
    rng: RngLike,
    permutation: np.ndarray | None = None,
) -> DvBatchResult:
    u = _as_node(u_batch, "u")
    v = _as_node(v_batch, "v")
    if u.rows != v.rows:
        raise ValueError(f"u and v batches must be row-aligned, got {u.rows} and {v.rows} rows")
    n = u.rows
    if n < MIN_DV_BATCH:
        raise ValueError(f"DV bound needs a batch of at least {MIN_DV_BATCH}, got {n}")
    perm = draw_permutation(n, rng) if permutation is None else np.asarray(permutation)
    joint_scores = net.score(u, v)
    marginal_scores = net.score(u, nd.take_rows(v, perm))
    joint_term = nd.mean(joint_scores)
    marginal_term = nd.sub(nd.logsumexp(marginal_scores), nd.constant(math.log(n)))
    bound = nd.sub(joint_term, marginal_term)
    return DvBatchResult(
        bound_value=bound.item(),
        joint_term=joint_term.item(),
        marginal_term=marginal_term.item(),
        bound=bound,
        joint_mean=joint_term,
        marginal_scores=marginal_scores,
    )


def evaluate_bound(net: StatisticsNetwork, u: np.ndarray, v: np.ndarray, rng: RngLike) -> float:
    return dv_bound(net, u, v, rng).bound_value


def _check_bound(value: float, limit: float, where: str) -> None:
    if not math.isfinite(value) or abs(value) > limit:
        raise NumericalError(
            f"{where}: DV bound diverged ({value:.4g} nats, limit {limit:g}); "
            "lower the estimator learning rate or standardise the inputs"
        )


def train_mi_estimator(
    samples_u: np.ndarray,
    samples_v: np.ndarray,
    cfg: EstimatorConfig,
    rng: RngState,
) -> tuple[StatisticsNetwork, MIEstimate, list[float]]:
    """Maximise the DV bound by gradient ascent; report the mean of the last full-data evaluations."""
    u = nd.as_matrix(samples_u, "samples_u")
    v = nd.as_matrix(samples_v, "samples_v")
    if u.shape[0] != v.shape[0]:
        raise ValueError(f"samples must be row-aligned, got {u.shape[0]} and {v.shape[0]} rows")
    n = u.shape[0]
    if n < cfg.min_samples:
        raise ValueError(f"MI estimation needs at least {cfg.min_samples} paired samples, got {n}")

    net = StatisticsNetwork(u.shape[1], v.shape[1], rng.child(0), cfg.hidden, cfg.clip)
    order_rng = rng.child(1).generator()
    batch_rng = rng.child(2).generator()
    eval_rng = rng.child(3).generator()
    params = net.parameters()
    state = nd.AdamState()
    moving_mean: float | None = None
    history: list[float] = []

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch):
            index = order[start : start + cfg.batch]
            if index.shape[0] < MIN_DV_BATCH:
                continue
            result = dv_bound(net, u[index], v[index], batch_rng)
            if cfg.ema_decay > 0.0:
                batch_mean = nd.mean(nd.exp(result.marginal_scores))
                observed = batch_mean.item()
                if moving_mean is None:
                    moving_mean = observed
                else:
                    moving_mean = cfg.ema_decay * moving_mean + (1.0 - cfg.ema_decay) * observed
                objective = nd.scale(
                    nd.sub(result.joint_mean, nd.scale(batch_mean, 1.0 / moving_mean)), -1.0
                )
            else:
                objective = nd.scale(result.bound, -1.0)
            grads = nd.backward(objective)
            nd.adam_step(params, grads, state, cfg.lr)
        value = evaluate_bound(net, u, v, eval_rng)
        _check_bound(value, cfg.divergence_limit, f"epoch {epoch}")
        history.append(value)
        logger.debug("estimator epoch %d: bound %.5f nats", epoch, value)

    window = history[-cfg.eval_window :]
    estimate = MIEstimate(float(np.mean(window)), ESTIMATOR_DV, True, n)
    logger.info("DV estimate %.4f nats over %d samples", estimate.value, n)
    return net, estimate, history


def estimate_cobias(
    features: np.ndarray,
    bias_labels: Sequence[int],
    target_labels: Sequence[int],
    cfg: EstimatorConfig,
    rng: RngState,
    n_biases: int | None = None,
    n_targets: int | None = None,
) -> MIEstimate:
    """Cobias = I(F; Z, Y) - I(F; Y), each term from its own trained estimator."""
    features = nd.as_matrix(features, "features")
    z = as_labels(bias_labels, "bias labels")
    y = as_labels(target_labels, "target labels")
    if not features.shape[0] == z.shape[0] == y.shape[0]:
        raise ValueError("features, bias labels and target labels must be row-aligned")
    n_biases = int(z.max()) + 1 if n_biases is None else n_biases
    n_targets = int(y.max()) + 1 if n_targets is None else n_targets
    y_hot = one_hot(y, n_targets)
    zy_hot = np.concatenate([one_hot(z, n_biases), y_hot], axis=1)

    with ThreadPoolExecutor(max_workers=2) as pool:
        joint_job = pool.submit(train_mi_estimator, features, zy_hot, cfg, rng.child(0))
        target_job = pool.submit(train_mi_estimator, features, y_hot, cfg, rng.child(1))
        _, joint_estimate, _ = joint_job.result()
        _, target_estimate, _ = target_job.result()

    value = joint_estimate.value - target_estimate.value
    logger.info(
        "Cobias %.4f nats (I(F;Z,Y)=%.4f, I(F;Y)=%.4f)",
        value,
        joint_estimate.value,
        target_estimate.value,
    )
    return MIEstimate(
        value,
        ESTIMATOR_DV_DIFFERENCE,
        False,
        int(features.shape[0]),
        components=(joint_estimate, target_estimate),
    )


def surrogate_inputs(
    features: Node,
    target_labels: Sequence[int],
    bias_labels: Sequence[int],
    n_targets: int,
    n_biases: int,
) -> tuple[Node, Node]:
    u = nd.concat([features, nd.constant(one_hot(target_labels, n_targets), "y_onehot")], axis=1)
    v = nd.constant(one_hot(bias_labels, n_biases), "z_onehot")
    return u, v


def surrogate_bias_term(
    net: StatisticsNetwork,
    features: Node,
    target_labels: Sequence[int],
    bias_labels: Sequence[int],
    n_targets: int,
    n_biases: int,
    rng: RngLike,
    permutation: np.ndarray | None = None,
) -> Node:
    """DV bound of I((F, Y); Z); differentiable in the feature nodes.

    Differs from I(F; Z | Y) only by I(Y; Z), which does not depend on the extractor.
    """
    u, v = surrogate_inputs(features, target_labels, bias_labels, n_targets, n_biases)
    if net.input_dim != u.cols + v.cols:
        raise ValueError(
            f"critic input width {net.input_dim} does not match d_f + A + B = {u.cols + v.cols}"
        )
    return dv_bound(net, u, v, rng, permutation).bound
