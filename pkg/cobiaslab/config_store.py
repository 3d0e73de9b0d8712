import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

from .constants import ENV_JOBS, ENV_SEED, REPORT_FORMATS
from .debias import TrainConfig
from .errors import ConfigError
from .fairmetrics import ReportConfig
from .mine import EstimatorConfig
from .synthdata import DomainShift, SpuriousSpec
from .utils import _parse_bool, format_float

METHOD_SECTION_PREFIX = "method:"


@dataclass(frozen=True)
class MethodSpec:
    name: str
    train: TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: SpuriousSpec = field(default_factory=SpuriousSpec)
    train_csv: str | None = None
    test_csv: str | None = None
    methods: tuple[MethodSpec, ...] = ()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    formats: tuple[str, ...] = REPORT_FORMATS
    jobs: int = 1
    hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16
    probe: bool = False
    report: ReportConfig = field(default_factory=ReportConfig)

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must list at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct, got {list(self.seeds)}")
        unknown = [name for name in self.formats if name not in REPORT_FORMATS]
        if unknown:
            raise ValueError(f"unknown report format(s) {unknown}; choose from {list(REPORT_FORMATS)}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")
        if self.feature_dim < 1 or any(width < 1 for width in self.hidden):
            raise ValueError("model widths must be positive")
        if (self.train_csv is None) != (self.test_csv is None):
            raise ValueError("train_csv and test_csv must be given together")
        names = [method.name for method in self.methods]
        if len(set(names)) != len(names):
            raise ValueError(f"method names must be distinct, got {names}")


# -- value codecs ---------------------------------------------------------------


def _to_int(text: str) -> int:
    return int(text.strip())


def _to_float(text: str) -> float:
    return float(text.strip())


def _to_bool(text: str) -> bool:
    parsed = _parse_bool(text)
    if parsed is None:
        raise ValueError(f"expected a boolean, got '{text.strip()}'")
    return parsed


def _to_str(text: str) -> str:
    value = text.strip()
    if not value:
        raise ValueError("expected a non-empty value")
    return value


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def _parse(text: str) -> Any:
        return None if not text.strip() else parse(text)

    return _parse


def _list_of(parse: Callable[[str], Any]) -> Callable[[str], tuple]:
    def _parse(text: str) -> tuple:
        return tuple(parse(item) for item in text.split(",") if item.strip())

    return _parse


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(item) for item in value)
    return str(value)


DATASET_KEYS: dict[str, Callable[[str], Any]] = {
    "n": _to_int,
    "n_targets": _to_int,
    "n_biases": _to_int,
    "corr": _to_float,
    "d_core": _to_int,
    "d_bias": _to_int,
    "d_noise": _to_int,
    "signal_sep": _to_float,
    "bias_sep": _to_float,
    "noise_sigma": _to_float,
    "n_test": _optional(_to_int),
    "seed": _to_int,
    "shift_corr": _optional(_to_float),
    "shift_signal_sep": _optional(_to_float),
    "train_csv": _optional(_to_str),
    "test_csv": _optional(_to_str),
}

TRAIN_KEYS: dict[str, Callable[[str], Any]] = {
    "epochs": _to_int,
    "batch": _to_int,
    "lr": _to_float,
    "weight_decay": _to_float,
    "beta": _to_float,
    "rho": _to_float,
    "method": _to_str,
    "dro_eta": _to_float,
    "alternation": _to_str,
    "critic_cold_start": _to_bool,
    "resample": _to_bool,
    "report_every": _to_int,
    "probe_epochs": _to_int,
    "probe_keep_head": _to_bool,
}

ESTIMATOR_KEYS: dict[str, Callable[[str], Any]] = {
    "epochs": _to_int,
    "batch": _to_int,
    "lr": _to_float,
    "hidden": _list_of(_to_int),
    "eval_window": _to_int,
    "clip": _to_float,
    "divergence_limit": _to_float,
    "ema_decay": _to_float,
    "min_samples": _to_int,
}

EXPERIMENT_KEYS: dict[str, Callable[[str], Any]] = {
    "seeds": _list_of(_to_int),
    "output_dir": _to_str,
    "formats": _list_of(_to_str),
    "jobs": _to_int,
    "hidden": _list_of(_to_int),
    "feature_dim": _to_int,
    "probe": _to_bool,
    "compute_cobias": _to_bool,
}

_FIXED_SECTIONS = ("experiment", "dataset", "train", "critic", "estimator")


# -- parsing --------------------------------------------------------------------


def _read_section(
    parser: configparser.ConfigParser,
    section: str,
    schema: Mapping[str, Callable[[str], Any]],
) -> dict[str, Any]:
    if not parser.has_section(section):
        return {}
    values: dict[str, Any] = {}
    for key, raw in parser.items(section, raw=True):
        parse = schema.get(key)
        if parse is None:
            raise ConfigError(f"{section}.{key}: unknown key")
        try:
            values[key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc
    return values


def _build(section: str, factory: Callable[..., Any], values: Mapping[str, Any]) -> Any:
    try:
        return factory(**values)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_experiment_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    for section in parser.sections():
        if section not in _FIXED_SECTIONS and not section.startswith(METHOD_SECTION_PREFIX):
            raise ConfigError(f"{source}: unknown section [{section}]")

    experiment = _read_section(parser, "experiment", EXPERIMENT_KEYS)
    dataset = _read_section(parser, "dataset", DATASET_KEYS)
    train = _read_section(parser, "train", TRAIN_KEYS)
    critic = _read_section(parser, "critic", ESTIMATOR_KEYS)
    estimator = _read_section(parser, "estimator", ESTIMATOR_KEYS)

    shift_corr = dataset.pop("shift_corr", None)
    shift_sep = dataset.pop("shift_signal_sep", None)
    if shift_corr is None and shift_sep is not None:
        raise ConfigError("dataset.shift_signal_sep: requires dataset.shift_corr")
    train_csv = dataset.pop("train_csv", None)
    test_csv = dataset.pop("test_csv", None)
    if shift_corr is not None:
        dataset["shift"] = DomainShift(shift_corr, shift_sep)
    spec = _build("dataset", SpuriousSpec, dataset)

    critic_cfg = _build("critic", EstimatorConfig, {"lr": 1e-3, **critic})
    base_train = {**train, "critic": critic_cfg}
    _build("train", TrainConfig, base_train)

    methods = []
    for section in parser.sections():
        if not section.startswith(METHOD_SECTION_PREFIX):
            continue
        name = section[len(METHOD_SECTION_PREFIX) :].strip()
        if not name:
            raise ConfigError(f"[{section}] method name must not be empty")
        overrides = _read_section(parser, section, TRAIN_KEYS)
        overrides.setdefault("method", name)
        methods.append(MethodSpec(name, _build(section, TrainConfig, {**base_train, **overrides})))
    if not methods:
        default = _build("train", TrainConfig, base_train)
        methods.append(MethodSpec(default.method, default))

    compute_cobias = experiment.pop("compute_cobias", True)
    report = ReportConfig(
        estimator=_build("estimator", EstimatorConfig, estimator),
        compute_cobias=compute_cobias,
    )
    return _build(
        "experiment",
        ExperimentConfig,
        {
            **experiment,
            "dataset": spec,
            "train_csv": train_csv,
            "test_csv": test_csv,
            "methods": tuple(methods),
            "report": report,
        },
    )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    return parse_experiment_config(text, source=str(path))


# -- serialisation --------------------------------------------------------------


def _dataclass_values(instance: Any, keys: Mapping[str, Any]) -> dict[str, str]:
    return {item.name: _format_value(getattr(instance, item.name)) for item in fields(instance) if item.name in keys}


def format_experiment_config(cfg: ExperimentConfig) -> str:
    """INI text that parses back to an equal ExperimentConfig."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    experiment = _dataclass_values(cfg, EXPERIMENT_KEYS)
    experiment["compute_cobias"] = _format_value(cfg.report.compute_cobias)
    parser["experiment"] = experiment

    dataset = _dataclass_values(cfg.dataset, DATASET_KEYS)
    shift = cfg.dataset.shift
    dataset["shift_corr"] = _format_value(None if shift is None else shift.corr)
    dataset["shift_signal_sep"] = _format_value(None if shift is None else shift.signal_sep)
    dataset["train_csv"] = _format_value(cfg.train_csv)
    dataset["test_csv"] = _format_value(cfg.test_csv)
    parser["dataset"] = dataset

    if cfg.methods:
        first = cfg.methods[0].train
        parser["train"] = _dataclass_values(first, TRAIN_KEYS)
        parser["critic"] = _dataclass_values(first.critic, ESTIMATOR_KEYS)
    parser["estimator"] = _dataclass_values(cfg.report.estimator, ESTIMATOR_KEYS)
    for method in cfg.methods:
        if method.train.critic != cfg.methods[0].train.critic:
            raise ConfigError(f"method '{method.name}': per-method critic settings cannot be serialised")
        parser[f"{METHOD_SECTION_PREFIX}{method.name}"] = _dataclass_values(method.train, TRAIN_KEYS)

    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def save_experiment_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_experiment_config(cfg), encoding="utf-8")
    return path


# -- environment ----------------------------------------------------------------


def load_env_fallback(env: Mapping[str, str] | None = None) -> dict[str, str]:
    source = env if env is not None else os.environ
    result: dict[str, str] = {}
    for key in (ENV_SEED, ENV_JOBS):
        raw = source.get(key)
        if raw is None or not str(raw).strip():
            continue
        result[key] = str(raw).strip()
    return result


def apply_env_fallback(cfg: ExperimentConfig, env_map: Mapping[str, str]) -> ExperimentConfig:
    """COBIAS_SEED replaces the seed list; COBIAS_JOBS sets the worker count."""
    env = dict(env_map or {})
    changes: dict[str, Any] = {}
    for key, target in ((ENV_SEED, "seeds"), (ENV_JOBS, "jobs")):
        text = env.get(key)
        if text is None:
            continue
        try:
            value = int(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got '{text}'") from exc
        changes[target] = (value,) if target == "seeds" else value
    if not changes:
        return cfg
    return _build("environment", lambda **values: replace(cfg, **values), changes)


def env_jobs_default(env_map: Mapping[str, str], fallback: int = 1) -> int:
    text = env_map.get(ENV_JOBS)
    if text is None:
        return fallback
    try:
        return max(1, int(text))
    except ValueError as exc:
        raise ConfigError(f"{ENV_JOBS}: expected an integer, got '{text}'") from exc
