"""The classifier under study: a feature extractor followed by a linear head.

Predictions always flow through the features (c = head(extractor(x))), so the
same feature matrix feeds both the accuracy metrics and the Cobias estimate.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import ndcore as nd
from .errors import ConfigError
from .ndcore import Node, RngState

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cobiaslab-parameters/1"

RngLike = RngState | np.random.Generator


def _split_rng(rng: RngLike) -> tuple[RngLike, RngLike]:
    if isinstance(rng, RngState):
        return rng.child(0), rng.child(1)
    return rng, rng


class BiasModel:
    def __init__(
        self,
        input_dim: int,
        n_classes: int,
        rng: RngLike,
        hidden: Sequence[int] = (32,),
        feature_dim: int = 16,
    ) -> None:
        if n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {n_classes}")
        extractor_rng, head_rng = _split_rng(rng)
        self.hidden = tuple(int(width) for width in hidden)
        self.extractor = nd.MLP(
            [int(input_dim), *self.hidden, int(feature_dim)],
            extractor_rng,
            activation="tanh",
            final_activation=True,
            name="extractor",
        )
        self.head = nd.MLP([int(feature_dim), int(n_classes)], head_rng, name="head")
        self.extractor_frozen = False

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    @property
    def feature_dim(self) -> int:
        return self.extractor.output_dim

    @property
    def n_classes(self) -> int:
        return self.head.output_dim

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = nd.as_matrix(X, "X")
        if X.shape[1] != self.input_dim:
            raise ValueError(f"X has {X.shape[1]} columns, model expects {self.input_dim}")
        return X

    def forward(self, X: np.ndarray) -> tuple[Node, Node]:
        """Graph nodes (features, logits); features are a constant while the extractor is frozen."""
        features = self.extractor.forward(nd.constant(self._check_input(X), "X"))
        if self.extractor_frozen:
            features = features.detach()
        return features, self.head.forward(features)

    def features(self, X: np.ndarray) -> np.ndarray:
        return self.extractor.forward(nd.constant(self._check_input(X), "X")).value

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.head.forward(nd.constant(self.features(X), "features")).value

    def predict(self, X: np.ndarray) -> np.ndarray:
        # argmax returns the first maximum, so ties go to the lower class index.
        return np.argmax(self.logits(X), axis=1).astype(np.int64)

    def freeze_extractor(self) -> None:
        self.extractor_frozen = True

    def unfreeze(self) -> None:
        self.extractor_frozen = False

    def trainable_parameters(self) -> list[Node]:
        if self.extractor_frozen:
            return self.head.parameters()
        return self.extractor.parameters() + self.head.parameters()

    def parameters(self) -> list[Node]:
        return self.extractor.parameters() + self.head.parameters()

    def reset_head(self, rng: RngLike) -> None:
        self.head.reinitialize(rng)

    def copy(self) -> "BiasModel":
        return copy.deepcopy(self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.extractor.state_dict(), **self.head.state_dict()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.extractor.load_state_dict(state)
        self.head.load_state_dict(state)

    def checksum(self) -> str:
        return self.extractor.checksum() + self.head.checksum()

    def to_checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": "bias-model",
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "feature_dim": self.feature_dim,
            "extractor_frozen": self.extractor_frozen,
            "parameters": encode_parameters(self.state_dict()),
        }

    @classmethod
    def from_checkpoint(cls, data: Mapping) -> "BiasModel":
        if data.get("format") != CHECKPOINT_FORMAT or data.get("kind") != "bias-model":
            raise ConfigError("not a bias-model checkpoint")
        try:
            model = cls(
                int(data["input_dim"]),
                int(data["n_classes"]),
                RngState(0),
                hidden=[int(width) for width in data["hidden"]],
                feature_dim=int(data["feature_dim"]),
            )
            model.load_state_dict(decode_parameters(data["parameters"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid bias-model checkpoint: {exc}") from exc
        model.extractor_frozen = bool(data.get("extractor_frozen", False))
        return model


def encode_parameters(state: Mapping[str, np.ndarray]) -> dict[str, dict]:
    """Row-major values with shape metadata; JSON floats keep full float64 precision."""
    return {
        name: {"shape": list(value.shape), "values": value.ravel(order="C").tolist()}
        for name, value in state.items()
    }


def decode_parameters(data: Mapping[str, Mapping]) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for name, entry in data.items():
        shape = tuple(int(size) for size in entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"parameter '{name}' has {values.size} values for shape {shape}")
        state[name] = values.reshape(shape)
    return state


def save_checkpoint(data: Mapping, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid checkpoint JSON ({exc})") from exc


def save_model(model: BiasModel, path: str | Path) -> Path:
    return save_checkpoint(model.to_checkpoint(), path)


def load_model(path: str | Path) -> BiasModel:
    return BiasModel.from_checkpoint(load_checkpoint(path))
