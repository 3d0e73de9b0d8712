from .cli import main, parse_args
from .debias import TrainConfig, fit, linear_probe_experiment
from .errors import CobiasError, ConfigError, NumericalError
from .infomeasure import ContingencyTable, MIEstimate, exact_conditional_mi, exact_mi
from .mine import EstimatorConfig, estimate_cobias
from .model import BiasModel
from .synthdata import SpuriousSpec, generate

__all__ = [
    "BiasModel",
    "CobiasError",
    "ConfigError",
    "ContingencyTable",
    "EstimatorConfig",
    "MIEstimate",
    "NumericalError",
    "SpuriousSpec",
    "TrainConfig",
    "estimate_cobias",
    "exact_conditional_mi",
    "exact_mi",
    "fit",
    "generate",
    "linear_probe_experiment",
    "main",
    "parse_args",
]
